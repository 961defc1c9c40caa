import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from srattack.audio import (PCM_SCALE, AudioError, Waveform, convolve_full, correlate_truncated,
                            generate_corpus, load_wav, store_wav)
from srattack.srs import EmbedderSpec, embed

finite = st.floats(-1.0, 1.0, allow_nan=False)


def direct_convolve(x, r):
    """O(n*m) reference: y[i] = sum_k r[k] x[i-k], truncated to len(x)."""
    n = len(x)
    y = np.zeros(n)
    for i in range(n):
        for k in range(min(len(r), i + 1)):
            y[i] += r[k] * x[i - k]
    return y


class TestWaveform:
    def test_rejects_empty(self):
        with pytest.raises(AudioError):
            Waveform(np.array([]))

    def test_rejects_2d(self):
        with pytest.raises(AudioError):
            Waveform(np.zeros((2, 2)))

    def test_validity(self):
        assert Waveform([0.5, -1.0]).is_valid()
        assert not Waveform([1.5]).is_valid()
        assert Waveform([1.5, -2.0]).clipped().is_valid()


class TestWav:
    def test_roundtrip_within_one_step(self, tmp_path, rng):
        w = Waveform(rng.uniform(-1, 1, 4000))
        store_wav(w, tmp_path / "a.wav")
        back = load_wav(tmp_path / "a.wav")
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / PCM_SCALE

    def test_header_fields(self, tmp_path):
        store_wav(Waveform(np.zeros(10)), tmp_path / "z.wav")
        raw = (tmp_path / "z.wav").read_bytes()
        assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"
        # format tag 1, mono, 16 kHz, 16 bits
        assert int.from_bytes(raw[20:22], "little") == 1
        assert int.from_bytes(raw[22:24], "little") == 1
        assert int.from_bytes(raw[24:28], "little") == 16000
        assert int.from_bytes(raw[34:36], "little") == 16

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "nope.wav")

    def test_not_a_wav(self, tmp_path):
        p = tmp_path / "junk.wav"
        p.write_bytes(b"not audio at all")
        with pytest.raises(AudioError):
            load_wav(p)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.integers(1, 200), elements=finite))
    def test_roundtrip_property(self, tmp_path_factory, x):
        p = tmp_path_factory.mktemp("wav") / "x.wav"
        store_wav(Waveform(x), p)
        assert np.max(np.abs(load_wav(p).samples - x)) <= 1.0 / PCM_SCALE


class TestCorpus:
    def test_deterministic(self):
        a = generate_corpus(3, 2, 0.5, 7)
        b = generate_corpus(3, 2, 0.5, 7)
        for k in a:
            for u, v in zip(a[k], b[k]):
                assert np.array_equal(u.samples, v.samples)

    def test_seed_changes_output(self):
        a = generate_corpus(1, 1, 0.5, 7)
        b = generate_corpus(1, 1, 0.5, 8)
        assert not np.array_equal(a["spk00"][0].samples, b["spk00"][0].samples)

    def test_shape(self):
        c = generate_corpus(10, 3, 0.5, 0)
        assert len(c) == 10
        assert all(len(v) == 3 and all(len(w) == 8000 for w in v) for v in c.values())

    def test_peak_normalised(self, corpus):
        for utts in corpus.values():
            for w in utts:
                assert np.max(np.abs(w.samples)) == pytest.approx(0.5)

    @pytest.mark.parametrize("kw", [dict(num_speakers=0), dict(utterances_per_speaker=0),
                                    dict(duration_s=0.4)])
    def test_preconditions(self, kw):
        args = dict(num_speakers=1, utterances_per_speaker=1, duration_s=0.5, master_seed=0)
        args.update(kw)
        with pytest.raises(ValueError):
            generate_corpus(**args)

    def test_same_speaker_more_similar(self, corpus):
        spec = EmbedderSpec()
        ids = list(corpus)
        emb = {k: np.array([embed(w, spec) for w in corpus[k]]) for k in ids}
        within, across = [], []
        for i, a in enumerate(ids):
            sim = emb[a] @ emb[a].T
            within.append(sim[np.triu_indices(len(sim), 1)].mean())
            for b in ids[i + 1:]:
                across.append((emb[a] @ emb[b].T).mean())
        assert np.mean(within) - np.mean(across) > 0


class TestConvolve:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal(100)
        assert np.allclose(convolve_full(x, [1.0]), x, atol=1e-12)

    def test_shifted_delta(self):
        assert np.allclose(convolve_full([1.0, 0, 0, 0], [0, 0.5]), [0, 0.5, 0, 0], atol=1e-12)

    def test_matches_direct_sum(self, rng):
        x = rng.standard_normal(512)
        r = rng.standard_normal(64)
        assert np.max(np.abs(convolve_full(x, r) - direct_convolve(x, r))) < 1e-9

    def test_kernel_longer_than_signal(self, rng):
        x = rng.standard_normal(20)
        r = rng.standard_normal(50)
        assert np.max(np.abs(convolve_full(x, r) - direct_convolve(x, r))) < 1e-9

    def test_empty_kernel(self):
        with pytest.raises(AudioError):
            convolve_full([1.0, 2.0], [])

    def test_keeps_waveform_type(self):
        out = convolve_full(Waveform([0.1, 0.2]), [1.0])
        assert isinstance(out, Waveform)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        g = np.random.default_rng(seed)
        x, y, r = g.standard_normal(300), g.standard_normal(300), g.standard_normal(40)
        lhs = convolve_full(a * x + b * y, r)
        rhs = a * convolve_full(x, r) + b * convolve_full(y, r)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 80))
    def test_correlation_is_adjoint(self, seed, m):
        # <conv(x), g> == <x, corr(g)>
        g = np.random.default_rng(seed)
        x, out, r = g.standard_normal(200), g.standard_normal(200), g.standard_normal(m)
        assert np.dot(convolve_full(x, r), out) == pytest.approx(
            np.dot(x, correlate_truncated(out, r)), abs=1e-9)
