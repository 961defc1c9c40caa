"""Waveforms, 16-bit PCM WAV I/O, synthetic speakers and FFT convolution."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 16000
PCM_SCALE = 32768.0
SYLLABLE_POW = 6


class AudioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono signal with float samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AudioError("waveform must be a non-empty 1-D sequence")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def is_valid(self) -> bool:
        return bool(np.all(np.abs(self.samples) <= 1.0))

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    def clipped(self) -> "Waveform":
        return self.with_samples(np.clip(self.samples, -1.0, 1.0))


def as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file into a :class:`Waveform`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such wav file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioError(f"{path}: not a PCM wav file ({exc})") from exc
    if channels != 1:
        raise AudioError(f"{path}: channel count {channels} != 1")
    if width != 2:
        raise AudioError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / PCM_SCALE, rate)


def quantize(samples) -> np.ndarray:
    samples = np.clip(as_array(samples), -1.0, 1.0 - 1.0 / PCM_SCALE)
    return np.round(samples * PCM_SCALE).astype("<i2")


def store_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit mono PCM; samples are clamped to [-1, 1 - 2**-15]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(quantize(w.samples).tobytes())


# ---------------------------------------------------------------------------
# Synthetic speakers


@dataclass(frozen=True)
class SynthSpeakerSpec:
    speaker_seed: int
    num_harmonics: int
    base_freq_hz: float
    envelope_coeffs: tuple

    @classmethod
    def from_seed(cls, speaker_seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE):
        rng = np.random.default_rng(speaker_seed)
        base = float(rng.uniform(80.0, 300.0))
        # harmonics stay below 0.45 * fs
        max_h = int(0.45 * sample_rate // base)
        num = int(min(rng.integers(12, 40), max_h))
        h = np.arange(1, num + 1)
        freqs = h * base
        tilt = rng.uniform(0.6, 1.4)
        env = h ** -tilt
        # three formant bumps with speaker-specific centres
        for centre, width, gain in zip(
            rng.uniform([300, 900, 2000], [900, 2000, 3500]),
            rng.uniform(80, 300, size=3),
            rng.uniform(1.0, 4.0, size=3),
        ):
            env = env * (1.0 + gain * np.exp(-0.5 * ((freqs - centre) / width) ** 2))
        env = env * rng.uniform(0.7, 1.3, size=num)
        env = env / env.max()
        return cls(int(speaker_seed), num, base, tuple(float(v) for v in env))

    def utterance(self, duration_s: float, seed, sample_rate: int = DEFAULT_SAMPLE_RATE,
                  noise_snr_db: float = 30.0, peak: float = 0.5) -> np.ndarray:
        rng = np.random.default_rng(seed)
        n = int(round(duration_s * sample_rate))
        t = np.arange(n) / sample_rate
        amps = np.asarray(self.envelope_coeffs)
        freqs = self.base_freq_hz * np.arange(1, self.num_harmonics + 1)
        phases = rng.uniform(0, 2 * np.pi, size=self.num_harmonics)
        sig = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
        # syllable-rate envelope with near-silent gaps between bursts
        rate = rng.uniform(2.0, 5.0)
        env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        sig = sig * env ** SYLLABLE_POW
        noise = rng.standard_normal(n)
        p_sig = np.mean(sig ** 2)
        sig = sig + noise * np.sqrt(p_sig / (np.mean(noise ** 2) * 10 ** (noise_snr_db / 10)))
        return sig * (peak / np.max(np.abs(sig)))


def generate_corpus(num_speakers: int, utterances_per_speaker: int, duration_s: float,
                    master_seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE,
                    prefix: str = "spk") -> dict:
    """Deterministic synthetic corpus ``{speaker_id: [Waveform, ...]}``.

    Speaker identity and every utterance are derived from ``master_seed`` only,
    so two calls with identical arguments give bit-identical samples.
    """
    if num_speakers < 1 or utterances_per_speaker < 1:
        raise ValueError("num_speakers and utterances_per_speaker must be >= 1")
    if duration_s < 0.5:
        raise ValueError("duration_s must be >= 0.5")
    corpus = {}
    for i in range(num_speakers):
        spk_seed = np.random.SeedSequence([master_seed, i]).generate_state(1)[0]
        spec = SynthSpeakerSpec.from_seed(int(spk_seed), sample_rate)
        utts = []
        for j in range(utterances_per_speaker):
            utt_seed = np.random.SeedSequence([master_seed, i, j, 1])
            utts.append(Waveform(spec.utterance(duration_s, utt_seed, sample_rate), sample_rate))
        corpus[f"{prefix}{i:02d}"] = utts
    return corpus


# ---------------------------------------------------------------------------
# Convolution


def _fft_len(n: int) -> int:
    return 1 << int(np.ceil(np.log2(max(n, 1))))


def convolve_full(x, r) -> Waveform | np.ndarray:
    """Linear convolution of ``x`` with kernel ``r`` truncated to ``len(x)``.

    Returns a Waveform when given one, otherwise an array.
    """
    xs = as_array(x)
    r = np.asarray(r, dtype=np.float64)
    if r.size == 0:
        raise AudioError("empty convolution kernel")
    n = xs.size
    m = min(r.size, n)
    nfft = _fft_len(n + m - 1)
    y = np.fft.irfft(np.fft.rfft(xs, nfft) * np.fft.rfft(r[:m], nfft), nfft)[:n]
    if isinstance(x, Waveform):
        return x.with_samples(y)
    return y


def correlate_truncated(g, r) -> np.ndarray:
    """Adjoint of :func:`convolve_full` applied to an output-space vector ``g``."""
    g = np.asarray(g, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n = g.size
    m = min(r.size, n)
    nfft = _fft_len(n + m - 1)
    # out[i] = sum_k r[k] g[i + k]
    y = np.fft.irfft(np.fft.rfft(g[::-1], nfft) * np.fft.rfft(r[:m], nfft), nfft)[:n]
    return y[::-1]
