"""Toy embedding-based speaker recognition system with exact input gradients.

Pipeline: Hann-windowed frames -> power spectrum -> mel filterbank -> log
-> per-frame affine map -> activation -> mean pooling -> L2 normalisation.
Every stage has a hand-written backward pass so white-box attacks can get
``d <embedding, upstream> / d waveform`` without an autodiff engine.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, as_array


class TaskKind(str, enum.Enum):
    OSI = "OSI"
    CSI = "CSI"
    SV = "SV"


IMPOSTER = "imposter"


@dataclass(frozen=True)
class FeatureConfig:
    frame_len: int = 256
    hop: int = 128
    num_filters: int = 24
    log_floor: float = 1e-8
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.frame_len <= 0 or self.frame_len & (self.frame_len - 1):
            raise ValueError("frame_len must be a power of two")
        if not 0 < self.hop <= self.frame_len:
            raise ValueError("hop must be in (0, frame_len]")
        if self.num_filters < 4:
            raise ValueError("num_filters must be >= 4")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def num_frames(self, n: int) -> int:
        return 1 + (n - self.frame_len) // self.hop


@dataclass(frozen=True)
class EmbedderSpec:
    weight_seed: int = 0
    embed_dim: int = 32
    activation: str = "tanh"
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    weight_scale: float = 0.5
    # filters centred outside this band get zero weight; None keeps every filter
    band_hz: tuple | None = (200.0, 3600.0)

    def __post_init__(self):
        if self.activation not in ("tanh", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.band_hz is not None:
            object.__setattr__(self, "band_hz", tuple(float(v) for v in self.band_hz))
            if int(np.sum(self.band_mask())) < 2:
                raise ValueError("band_hz must contain at least two filter centres")

    def band_mask(self) -> np.ndarray:
        centres = filter_centres_hz(self.feature_config)
        if self.band_hz is None:
            return np.ones(centres.size, dtype=bool)
        lo, hi = self.band_hz
        return (centres >= lo) & (centres <= hi)

    @property
    def name(self) -> str:
        return f"{self.activation}-s{self.weight_seed}"

    def to_dict(self) -> dict:
        fc = self.feature_config
        return {
            "weight_seed": self.weight_seed,
            "embed_dim": self.embed_dim,
            "activation": self.activation,
            "weight_scale": self.weight_scale,
            "band_hz": None if self.band_hz is None else list(self.band_hz),
            "feature_config": {
                "frame_len": fc.frame_len, "hop": fc.hop, "num_filters": fc.num_filters,
                "log_floor": fc.log_floor, "sample_rate": fc.sample_rate,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderSpec":
        d = dict(d)
        fc = FeatureConfig(**d.pop("feature_config", {}))
        return cls(feature_config=fc, **d)


# ---------------------------------------------------------------------------
# Feature extraction


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(num_filters: int, frame_len: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (peak 1) evenly spaced on the mel scale, shape (filters, bins)."""
    bins = np.arange(frame_len // 2 + 1) * sample_rate / frame_len
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), num_filters + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def filter_centres_hz(cfg: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.num_filters + 2))
    return edges[1:-1]


@lru_cache(maxsize=None)
def _hann(frame_len: int) -> np.ndarray:
    # periodic Hann
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame_len) / frame_len)
    w.setflags(write=False)
    return w


def _frame_index(n: int, cfg: FeatureConfig) -> np.ndarray:
    num = cfg.num_frames(n)
    if num < 1:
        raise ValueError(f"waveform of {n} samples is shorter than one frame ({cfg.frame_len})")
    return np.arange(num)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]


def extract_features(x, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log mel filterbank energies, shape ``(frames, num_filters)``."""
    return _features_forward(as_array(x), cfg)[0]


def _features_forward(xs: np.ndarray, cfg: FeatureConfig):
    idx = _frame_index(xs.size, cfg)
    win = _hann(cfg.frame_len)
    spec = np.fft.rfft(xs[idx] * win, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(cfg.num_filters, cfg.frame_len, cfg.sample_rate)
    energy = power @ fb.T
    feats = np.log(cfg.log_floor + energy)
    return feats, (idx, spec, energy)


def _features_backward(g_feats: np.ndarray, n: int, cfg: FeatureConfig, cache) -> np.ndarray:
    idx, spec, energy = cache
    fb = mel_filterbank(cfg.num_filters, cfg.frame_len, cfg.sample_rate)
    g_power = (g_feats / (cfg.log_floor + energy)) @ fb
    # d|X_k|^2/dy_n = 2 Re(X_k e^{+2 pi i k n / L}); sum over the half spectrum
    full = np.zeros((idx.shape[0], cfg.frame_len), dtype=np.complex128)
    full[:, : cfg.frame_len // 2 + 1] = g_power * spec
    g_frames = 2.0 * cfg.frame_len * np.fft.ifft(full, axis=1).real
    g_frames *= _hann(cfg.frame_len)
    grad = np.zeros(n)
    np.add.at(grad, idx.ravel(), g_frames.ravel())
    return grad


# ---------------------------------------------------------------------------
# Embedder


@lru_cache(maxsize=64)
def embedder_weights(spec: EmbedderSpec):
    """Seeded affine map ``(W, b)``; columns of W sum to zero across filters.

    Zero-sum columns make the pre-activations blind to a constant offset in
    the log features, i.e. the embedding ignores overall input gain. Rows of
    filters outside ``spec.band_hz`` are zero: bands below the pitch range
    and above the formant region carry mostly noise in this corpus.
    """
    rng = np.random.default_rng(spec.weight_seed)
    mask = spec.band_mask()
    na = int(mask.sum())
    active = rng.standard_normal((na, spec.embed_dim)) * spec.weight_scale / np.sqrt(na)
    active -= active.mean(axis=0, keepdims=True)
    w = np.zeros((mask.size, spec.embed_dim))
    w[mask] = active
    b = rng.standard_normal(spec.embed_dim) * 0.1
    w.setflags(write=False)
    b.setflags(write=False)
    return w, b


def _activate(z, kind):
    if kind == "tanh":
        h = np.tanh(z)
        return h, 1.0 - h * h
    # softplus shifted so that act(0) = 0
    h = np.logaddexp(0.0, z) - np.log(2.0)
    return h, 0.5 * (1.0 + np.tanh(0.5 * z))


def _embed_forward(xs: np.ndarray, spec: EmbedderSpec):
    feats, fcache = _features_forward(xs, spec.feature_config)
    w, b = embedder_weights(spec)
    z = feats @ w + b
    h, dh = _activate(z, spec.activation)
    m = h.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm == 0.0:
        raise FloatingPointError("pooled embedding is exactly zero")
    return m / norm, (fcache, dh, norm, feats.shape[0])


def embed(x, spec: EmbedderSpec = EmbedderSpec()) -> np.ndarray:
    """Unit-norm speaker embedding of ``x``."""
    return _embed_forward(as_array(x), spec)[0]


def _embed_backward(upstream, xs, spec, e, cache):
    fcache, dh, norm, frames = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    g_m = (upstream - e * (e @ upstream)) / norm
    g_z = (g_m / frames)[None, :] * dh
    w, _ = embedder_weights(spec)
    g_feats = g_z @ w.T
    return _features_backward(g_feats, xs.size, spec.feature_config, fcache)


def embed_input_grad(x, spec: EmbedderSpec, upstream) -> np.ndarray:
    """Gradient of ``<embed(x), upstream>`` with respect to every sample of ``x``."""
    xs = as_array(x)
    e, cache = _embed_forward(xs, spec)
    return _embed_backward(upstream, xs, spec, e, cache)


def embed_with_vjp(x, spec: EmbedderSpec):
    """Return ``(embedding, vjp)`` where ``vjp(u)`` is the input gradient for upstream ``u``."""
    xs = as_array(x)
    e, cache = _embed_forward(xs, spec)
    return e, lambda u: _embed_backward(u, xs, spec, e, cache)


# ---------------------------------------------------------------------------
# Enrollment, scoring, decisions


@dataclass(frozen=True)
class SpeakerDatabase:
    task: TaskKind
    speaker_ids: tuple
    embeddings: np.ndarray
    threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        emb = np.array(self.embeddings, dtype=np.float64, ndmin=2)
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "speaker_ids", tuple(self.speaker_ids))
        if emb.shape[0] != len(self.speaker_ids):
            raise ValueError("one embedding per speaker id required")
        if self.task is TaskKind.SV and len(self.speaker_ids) != 1:
            raise ValueError("SV database must enroll exactly one speaker")

    def __len__(self):
        return len(self.speaker_ids)

    def with_threshold(self, threshold: float | None) -> "SpeakerDatabase":
        return SpeakerDatabase(self.task, self.speaker_ids, self.embeddings, threshold)

    def with_task(self, task) -> "SpeakerDatabase":
        return SpeakerDatabase(task, self.speaker_ids, self.embeddings, self.threshold)

    def index(self, speaker_id: str) -> int:
        return self.speaker_ids.index(speaker_id)

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task.value,
            "threshold": self.threshold,
            "speakers": [
                {"id": sid, "embedding": [repr(float(v)) for v in row]}
                for sid, row in zip(self.speaker_ids, self.embeddings)
            ],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SpeakerDatabase":
        d = json.loads(text)
        ids = [s["id"] for s in d["speakers"]]
        emb = [[float(v) for v in s["embedding"]] for s in d["speakers"]]
        return cls(d["task"], ids, np.array(emb), d.get("threshold"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SpeakerDatabase":
        return cls.from_json(Path(path).read_text())


def enroll(voices: dict, spec: EmbedderSpec, task=TaskKind.CSI) -> SpeakerDatabase:
    """Enrollment embedding per speaker = renormalised mean of voice embeddings."""
    task = TaskKind(task)
    if task is TaskKind.SV and len(voices) != 1:
        raise ValueError("SV enrollment takes exactly one speaker")
    ids, rows = [], []
    for sid, utts in voices.items():
        if not utts:
            raise ValueError(f"speaker {sid!r} has no enrollment voices")
        mean = np.mean([embed(u, spec) for u in utts], axis=0)
        ids.append(sid)
        rows.append(mean / np.linalg.norm(mean))
    return SpeakerDatabase(task, ids, np.array(rows))


def score(x, db: SpeakerDatabase, spec: EmbedderSpec) -> np.ndarray:
    """Cosine score against every enrolled speaker (length 1 for SV)."""
    return db.embeddings @ embed(x, spec)


def decide(scores, db: SpeakerDatabase):
    """Speaker id (argmax, lowest index on ties) or :data:`IMPOSTER`."""
    s = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    if s.size != len(db):
        raise ValueError(f"score vector of length {s.size} for {len(db)} enrolled speakers")
    best = int(np.argmax(s))
    if db.task is TaskKind.CSI:
        return db.speaker_ids[best]
    if db.threshold is None:
        raise ValueError(f"{db.task.value} decision needs a threshold")
    return db.speaker_ids[best] if s[best] >= db.threshold else IMPOSTER


def far_frr(genuine, imposter, threshold: float):
    genuine = np.asarray(genuine, dtype=np.float64)
    imposter = np.asarray(imposter, dtype=np.float64)
    far = float(np.mean(imposter >= threshold))
    frr = float(np.mean(genuine < threshold))
    return far, frr


def tune_threshold_eer(genuine, imposter):
    """Sweep midpoints of the sorted score union; return ``(theta, eer)``.

    The chosen threshold minimises ``|FAR - FRR|`` (ties go to the lower
    threshold) and the EER is reported as ``(FAR + FRR) / 2`` there.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    imposter = np.asarray(imposter, dtype=np.float64)
    if genuine.size == 0 or imposter.size == 0:
        raise ValueError("genuine and imposter score lists must be non-empty")
    union = np.unique(np.concatenate([genuine, imposter]))
    if union.size == 1:
        candidates = union
    else:
        candidates = (union[:-1] + union[1:]) / 2
    gs = np.sort(genuine)
    ims = np.sort(imposter)
    far = 1.0 - np.searchsorted(ims, candidates, side="left") / ims.size
    frr = np.searchsorted(gs, candidates, side="left") / gs.size
    gap = np.abs(far - frr)
    i = int(np.argmin(gap))  # first minimum = lowest threshold
    return float(candidates[i]), float((far[i] + frr[i]) / 2)
