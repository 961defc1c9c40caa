"""Over-the-air distortions: image-source RIRs, SNR-exact noise, transform sampling.

The robust (expectation-over-transforms) attack at the bottom reuses the
white-box descent loop from :mod:`srattack.attack`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import AttackConfig, _as_waveform, _finish, _white_box_goal, signed_descent
from .audio import (DEFAULT_SAMPLE_RATE, Waveform, as_array, convolve_full, correlate_truncated,
                    load_wav, store_wav)
from .losses import input_loss_value_and_grad
from .srs import embed

D_MIN = 0.1


class NoiseKind(str, enum.Enum):
    WHITE = "white-gaussian"
    UNIFORM = "uniform"


class TransformKind(str, enum.Enum):
    IDENTITY = "Identity"
    NOISE = "NoiseOnly"
    RIR = "RirOnly"
    NOISE_RIR = "NoiseAndRir"


@dataclass(frozen=True)
class RoomSpec:
    dims_m: tuple
    absorption: float
    source_pos_m: tuple
    mic_pos_m: tuple
    max_order: int = 6
    speed_of_sound: float = 343.0
    fs: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        dims = np.asarray(self.dims_m, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValueError("room dims must be three positive lengths")
        if not 0.0 < self.absorption < 1.0:
            raise ValueError("absorption must lie in (0, 1)")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")
        for name in ("source_pos_m", "mic_pos_m"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
                raise ValueError(f"{name} {tuple(p)} is not strictly inside the room")

    def direct_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.source_pos_m, self.mic_pos_m)))

    def to_dict(self) -> dict:
        return {
            "dims_m": list(self.dims_m), "absorption": self.absorption,
            "source_pos_m": list(self.source_pos_m), "mic_pos_m": list(self.mic_pos_m),
            "max_order": self.max_order, "speed_of_sound": self.speed_of_sound, "fs": self.fs,
        }

    @classmethod
    def random(cls, rng: np.random.Generator, fs: int = DEFAULT_SAMPLE_RATE,
               absorption=(0.5, 0.9), max_order: int = 6) -> "RoomSpec":
        dims = rng.uniform([3.0, 3.0, 2.5], [8.0, 6.0, 3.5])
        src = rng.uniform(0.5, dims - 0.5)
        mic = rng.uniform(0.5, dims - 0.5)
        return cls(tuple(float(v) for v in dims), float(rng.uniform(*absorption)),
                   tuple(float(v) for v in src), tuple(float(v) for v in mic),
                   max_order=max_order, fs=fs)


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    taps: np.ndarray
    fs: int = DEFAULT_SAMPLE_RATE
    rir_id: str = ""

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0 or not np.all(np.isfinite(taps)):
            raise ValueError("impulse response needs a finite, non-empty tap vector")
        object.__setattr__(self, "taps", taps)

    @property
    def direct_index(self) -> int:
        return int(np.flatnonzero(self.taps)[0])

    @classmethod
    def delta(cls, fs: int = DEFAULT_SAMPLE_RATE) -> "ImpulseResponse":
        return cls(np.array([1.0]), fs, "delta")


def _axis_images(src: float, length: float, max_order: int):
    """Image coordinates and reflection counts along one axis."""
    coords, counts = [], []
    for n in range(-max_order, max_order + 1):
        for q in (0, 1):
            k = abs(n - q) + abs(n)
            if k <= max_order:
                coords.append((1 - 2 * q) * src + 2 * n * length)
                counts.append(k)
    return np.array(coords), np.array(counts)


def simulate_rir(room: RoomSpec, rir_id: str = "") -> ImpulseResponse:
    """Image-source RIR with nearest-sample taps and 1/d spreading.

    Each image contributes ``(1 - absorption) ** reflections / max(d, 0.1)``
    at tap ``round(fs * d / c)``; the result is scaled so that the direct
    path has amplitude 1.
    """
    per_axis = [_axis_images(s, size, room.max_order)
                for s, size in zip(room.source_pos_m, room.dims_m)]
    (xs, kx), (ys, ky), (zs, kz) = per_axis
    px, py, pz = np.meshgrid(xs, ys, zs, indexing="ij")
    reflections = kx[:, None, None] + ky[None, :, None] + kz[None, None, :]
    mic = room.mic_pos_m
    dist = np.sqrt((px - mic[0]) ** 2 + (py - mic[1]) ** 2 + (pz - mic[2]) ** 2).ravel()
    reflections = reflections.ravel()
    amp = (1.0 - room.absorption) ** reflections / np.maximum(dist, D_MIN)
    idx = np.rint(room.fs * dist / room.speed_of_sound).astype(int)
    taps = np.zeros(idx.max() + 1)
    np.add.at(taps, idx, amp)
    direct = room.direct_distance()
    return ImpulseResponse(taps * max(direct, D_MIN), room.fs, rir_id)


def make_rir_pool(num: int, seed: int, prefix: str, fs: int = DEFAULT_SAMPLE_RATE,
                  max_order: int = 6, absorption=(0.5, 0.9)):
    """``num`` random rooms -> ``(rooms, rirs)``; ids are ``{prefix}-{i}``."""
    rng = np.random.default_rng(seed)
    rooms = [RoomSpec.random(rng, fs, absorption, max_order) for _ in range(num)]
    rirs = [simulate_rir(room, f"{prefix}-{i:04d}") for i, room in enumerate(rooms)]
    return rooms, rirs


def save_rir_pool(directory, rooms, rirs) -> None:
    """Store each RIR as float-scaled PCM plus a JSON manifest with room parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for room, rir in zip(rooms, rirs):
        peak = float(np.max(np.abs(rir.taps)))
        store_wav(Waveform(rir.taps / peak * 0.5, rir.fs), directory / f"{rir.rir_id}.wav")
        manifest.append({"id": rir.rir_id, "file": f"{rir.rir_id}.wav",
                         "scale": peak / 0.5, "room": room.to_dict()})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_rir_pool(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    rirs = []
    for entry in manifest:
        w = load_wav(directory / entry["file"])
        rirs.append(ImpulseResponse(w.samples * entry["scale"], w.sample_rate, entry["id"]))
    return rirs


# ---------------------------------------------------------------------------
# Noise


def signal_power(x) -> float:
    return float(np.mean(as_array(x) ** 2))


def noise_gain(x, n, snr_db: float) -> float:
    """Scale ``gamma`` such that ``10 log10(P_x / P_{gamma n}) = snr_db``."""
    p_x = signal_power(x)
    p_n = signal_power(n)
    if p_x == 0.0 or p_n == 0.0:
        raise ValueError("signal and noise must both have non-zero power")
    return math.sqrt(p_x / (p_n * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(x, n, snr_db: float):
    """Return ``x + gamma * n`` with ``gamma`` set by :func:`noise_gain`.

    ``snr_db = inf`` returns ``x`` unchanged.
    """
    xs = as_array(x)
    if math.isinf(snr_db) and snr_db > 0:
        return x
    n = np.asarray(n, dtype=np.float64)
    if n.size < xs.size:
        raise ValueError("noise must be at least as long as the signal")
    n = n[: xs.size]
    y = xs + noise_gain(xs, n, snr_db) * n
    return x.with_samples(y) if isinstance(x, Waveform) else y


def draw_noise(kind, size: int, rng: np.random.Generator) -> np.ndarray:
    kind = NoiseKind(kind)
    if kind is NoiseKind.WHITE:
        return rng.standard_normal(size)
    return rng.uniform(-1.0, 1.0, size)


# ---------------------------------------------------------------------------
# Transforms


@dataclass(frozen=True)
class TransformSet:
    kind: TransformKind = TransformKind.IDENTITY
    snr_lo_db: float = 0.0
    snr_hi_db: float = 20.0
    noise_dist: NoiseKind = NoiseKind.WHITE
    rir_pool: tuple = ()
    # measure SNR against the reverberated signal (True) or the dry input
    snr_after_reverb: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))
        object.__setattr__(self, "noise_dist", NoiseKind(self.noise_dist))
        object.__setattr__(self, "rir_pool", tuple(self.rir_pool))
        if self.snr_lo_db > self.snr_hi_db:
            raise ValueError("snr_lo_db must not exceed snr_hi_db")
        if self.kind in (TransformKind.RIR, TransformKind.NOISE_RIR) and not self.rir_pool:
            raise ValueError(f"{self.kind.value} needs a non-empty RIR pool")


@dataclass(frozen=True, eq=False)
class SampledTransform:
    """One draw ``F_p``: ``x -> r * x + gamma * n``.

    ``gamma`` is fixed at sampling time from the signal it is applied to
    first, so the transform is affine in ``x`` for the gradient pass.
    """

    rir: ImpulseResponse | None = None
    snr_db: float | None = None
    noise: np.ndarray | None = None
    snr_after_reverb: bool = True

    def __call__(self, x):
        return self.apply(x)[0]

    def apply(self, x):
        """Return ``(F_p(x), gamma)``."""
        xs = as_array(x)
        y = xs if self.rir is None else convolve_full(xs, self.rir.taps)
        gamma = 0.0
        if self.snr_db is not None:
            ref = y if self.snr_after_reverb else xs
            n = self.noise[: xs.size]
            gamma = noise_gain(ref, n, self.snr_db)
            y = y + gamma * n
        out = x.with_samples(y) if isinstance(x, Waveform) else y
        return out, gamma

    def adjoint(self, g) -> np.ndarray:
        """Gradient pull-back through the linear (reverberation) part."""
        if self.rir is None:
            return np.asarray(g, dtype=np.float64)
        return correlate_truncated(g, self.rir.taps)


def sample_transform(tset: TransformSet, rng, length: int) -> SampledTransform:
    """Draw one transform from ``tset``; ``rng`` is a Generator or a seed."""
    rng = np.random.default_rng(rng)
    rir = None
    snr = None
    noise = None
    if tset.kind in (TransformKind.RIR, TransformKind.NOISE_RIR):
        rir = tset.rir_pool[int(rng.integers(len(tset.rir_pool)))]
    if tset.kind in (TransformKind.NOISE, TransformKind.NOISE_RIR):
        snr = float(rng.uniform(tset.snr_lo_db, tset.snr_hi_db))
        noise = draw_noise(tset.noise_dist, length, rng)
    return SampledTransform(rir, snr, noise, tset.snr_after_reverb)


def transmit(x, rir: ImpulseResponse | None, noise=None, rng=None):
    """Simulate one playback/recording pass.

    ``noise`` is ``None`` or ``(kind, snr_db)``. The received signal is
    rescaled to the peak of the emitted one (receiver gain control).
    """
    xs = as_array(x)
    y = xs if rir is None else convolve_full(xs, rir.taps)
    if noise is not None:
        kind, snr_db = noise
        n = draw_noise(kind, xs.size, np.random.default_rng(rng))
        y = mix_at_snr(y, n, snr_db)
    peak_in = np.max(np.abs(xs))
    peak_out = np.max(np.abs(y))
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return x.with_samples(y) if isinstance(x, Waveform) else y


# ---------------------------------------------------------------------------
# Robust attack


def robust_config(epsilon: float, iters: int = 400, **kw):
    """AttackConfig with robust-attack defaults: Adam, ``alpha = min(5 * eps / iters, eps)``."""
    kw.setdefault("adam", True)
    kw.setdefault("alpha", min(5.0 * epsilon / iters, epsilon))
    return AttackConfig(optimizer="PGD", epsilon=epsilon, iters=iters, **kw)


def expected_loss_and_grad(x, loss, setting, db, spec, transforms, theta=None):
    """Mean loss over ``transforms`` and its gradient pulled back to ``x``."""
    xs = as_array(x)
    total = 0.0
    grad = np.zeros_like(xs)
    for tf in transforms:
        value, _, g = input_loss_value_and_grad(loss, tf(xs), db, spec, setting, theta)
        total += value
        grad += tf.adjoint(g)
    k = len(transforms)
    return total / k, grad / k


def robust_attack(x, loss: str, setting, db, spec, cfg=None, tset: TransformSet | None = None,
                  K: int = 10, lam: float = 0.0):
    """Expectation-over-transforms attack.

    Each iteration draws ``K`` transforms from ``tset``, averages the loss of
    the transformed inputs, adds ``lam * ||x' - x||_2`` and takes one step
    (Adam when ``cfg.adam``) followed by the eps-ball/box clip. Transform
    draws come from ``cfg.seed`` so runs are reproducible. Success is judged
    on the untransformed adversarial voice.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    cfg = robust_config(0.002) if cfg is None else cfg
    tset = TransformSet() if tset is None else tset
    setting.check_db(db)
    x0 = _as_waveform(x)
    n = len(x0)
    rng = np.random.default_rng([cfg.seed, 11])
    goal = _white_box_goal(setting, db)

    def grad_fn(xs):
        transforms = [sample_transform(tset, rng, n) for _ in range(K)]
        value, grad = expected_loss_and_grad(xs, loss, setting, db, spec, transforms)
        if lam:
            delta = xs - x0.samples
            dist = np.linalg.norm(delta)
            value += lam * dist
            if dist > 0:
                grad = grad + lam * delta / dist
        return value, db.embeddings @ embed(xs, spec), grad

    xs, used, _ = signed_descent(x0, grad_fn, goal, cfg)

    def clean_loss(v):
        value, scores, _ = input_loss_value_and_grad(loss, v, db, spec, setting)
        return value, scores

    return _finish(x0, xs, used, 0, clean_loss, goal, {"K": K, "transform": tset.kind.value})

