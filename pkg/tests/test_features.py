import numpy as np
import pytest

from recladder.errors import DataError
from recladder.features import (FEATURE_DIM, FeatureStats, Waveform,
                                dct_matrix, deltas, featurize_waveform,
                                frame_signal, hz_to_mel, mel_filterbank,
                                mel_to_hz, mfcc, normalize, read_wav,
                                write_wav)


def sine_wave(freq, seconds=0.2, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=sr)


class TestWavIO:
    def test_zero_samples(self, tmp_path):
        path = tmp_path / "z.wav"
        write_wav(path, Waveform(np.zeros(100), 16000))
        w = read_wav(path)
        assert w.sample_rate == 16000
        np.testing.assert_array_equal(w.samples, np.zeros(100))

    def test_full_scale_negative(self, tmp_path):
        path = tmp_path / "m.wav"
        write_wav(path, Waveform(np.array([-1.0, 0.0]), 16000))
        w = read_wav(path)
        assert w.samples[0] == -1.0

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=500)
        original = Waveform(ints / 32768.0, 16000)
        path = tmp_path / "r.wav"
        write_wav(path, original)
        loaded = read_wav(path)
        np.testing.assert_array_equal(loaded.samples, original.samples)
        write_wav(tmp_path / "r2.wav", loaded)
        assert (tmp_path / "r.wav").read_bytes() == \
            (tmp_path / "r2.wav").read_bytes()

    def test_rejects_non_wav(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"definitely not RIFF")
        with pytest.raises(DataError):
            read_wav(path)

    def test_rejects_stereo(self, tmp_path):
        import wave
        path = tmp_path / "st.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(b"\x00\x00" * 40)
        with pytest.raises(DataError, match="mono"):
            read_wav(path)


class TestFraming:
    def test_single_frame_boundary(self):
        frames = frame_signal(Waveform(np.zeros(320), 16000))
        assert frames.shape == (1, 320)

    def test_two_frames(self):
        w = Waveform(np.arange(480) / 480.0, 16000)
        frames = frame_signal(w)
        assert frames.shape == (2, 320)
        np.testing.assert_array_equal(frames[0], w.samples[0:320])
        np.testing.assert_array_equal(frames[1], w.samples[160:480])

    def test_too_short(self):
        with pytest.raises(DataError):
            frame_signal(Waveform(np.zeros(319), 16000))

    def test_count_formula_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(320, 20000))
            frames = frame_signal(Waveform(np.zeros(n), 16000))
            assert frames.shape[0] == 1 + (n - 320) // 160


class TestDctAndFilterbank:
    def test_dct_orthonormal(self):
        m = dct_matrix(40)
        np.testing.assert_allclose(m @ m.T, np.eye(40), atol=1e-10)
        np.testing.assert_allclose(m.T @ m, np.eye(40), atol=1e-10)

    def test_mel_scale_round_trip(self):
        f = np.linspace(0, 8000, 50)
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)

    def test_filterbank_nonnegative_and_covering(self):
        fb = mel_filterbank(16000, 512)
        assert np.all(fb >= 0)
        break_lo = 0.0
        break_hi = 8000.0
        bins_hz = np.arange(257) * (16000 / 512)
        inside = (bins_hz > break_lo) & (bins_hz < break_hi)
        assert np.all(fb.sum(axis=0)[inside] > 0)


class TestMfcc:
    def test_silence_constant_vector(self):
        frames = np.zeros((5, 320))
        c = mfcc(frames, 16000)
        assert c.shape == (5, 13)
        # every frame equals the DCT of the floored log energies
        expected = (np.full(40, np.log(1e-10)) @ dct_matrix(40)[:13].T)
        for t in range(5):
            np.testing.assert_allclose(c[t], expected, atol=1e-12)

    def test_distinct_tones_differ(self):
        c1 = mfcc(frame_signal(sine_wave(1000)), 16000)
        c4 = mfcc(frame_signal(sine_wave(4000)), 16000)
        assert np.linalg.norm(c1.mean(axis=0) - c4.mean(axis=0)) > 0.1

    def test_amplitude_scaling_is_additive_in_cepstrum(self):
        # doubling the amplitude scales power by 4, so log mel energies shift
        # by log 4 and the cepstra by DCT(log 4 * ones); needs full-band
        # energy so no band sits at the log floor (a pure tone would)
        rng = np.random.default_rng(5)
        w1 = Waveform(rng.uniform(-0.2, 0.2, size=3200), 16000)
        w2 = Waveform(w1.samples * 2.0, w1.sample_rate)
        spectrum = np.abs(np.fft.rfft(frame_signal(w1), 512)) ** 2
        assert (spectrum @ mel_filterbank(16000, 512).T).min() > 1e-10
        c1 = mfcc(frame_signal(w1), 16000)
        c2 = mfcc(frame_signal(w2), 16000)
        shift = np.log(4.0) * np.ones(40) @ dct_matrix(40)[:13].T
        np.testing.assert_allclose(c2 - c1, np.tile(shift, (c1.shape[0], 1)),
                                   atol=1e-9)

    def test_pipeline_deterministic(self):
        w = sine_wave(440)
        a = featurize_waveform(w)
        b = featurize_waveform(Waveform(w.samples.copy(), w.sample_rate))
        assert a.shape[1] == FEATURE_DIM
        np.testing.assert_array_equal(a, b)


class TestDeltas:
    def test_constant_input_zero(self):
        c = np.tile(np.array([1.5, -2.0, 0.25]), (6, 1))
        d, dd = deltas(c)
        np.testing.assert_array_equal(d, np.zeros_like(c))
        np.testing.assert_array_equal(dd, np.zeros_like(c))

    def test_linear_ramp_interior(self):
        v = np.array([0.5, -1.0])
        c = np.arange(10)[:, None] * v
        d, _ = deltas(c)
        for t in range(2, 8):
            np.testing.assert_allclose(d[t], v, atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        c = rng.normal(size=(9, 4))
        width = 2
        denom = 2.0 * sum(k * k for k in range(1, width + 1))

        def naive(x):
            out = np.zeros_like(x)
            for t in range(x.shape[0]):
                for k in range(1, width + 1):
                    tp = min(t + k, x.shape[0] - 1)
                    tm = max(t - k, 0)
                    out[t] += k * (x[tp] - x[tm])
            return out / denom

        d, dd = deltas(c)
        np.testing.assert_allclose(d, naive(c), atol=1e-12)
        np.testing.assert_allclose(dd, naive(naive(c)), atol=1e-12)


class TestNormalize:
    def test_fit_gives_zero_mean_unit_std(self):
        rng = np.random.default_rng(3)
        mats = [rng.normal(loc=3.0, scale=2.5, size=(rng.integers(5, 20), 6))
                for _ in range(10)]
        normed, stats = normalize(mats)
        stacked = np.concatenate(normed, axis=0)
        assert np.abs(stacked.mean(axis=0)).max() < 1e-9
        assert np.abs(stacked.std(axis=0) - 1.0).max() < 1e-6

    def test_constant_dimension_maps_to_zero(self):
        mats = [np.full((8, 2), 7.0)]
        normed, stats = normalize(mats)
        np.testing.assert_array_equal(normed[0], np.zeros((8, 2)))
        assert stats.std[0] == 1e-6

    def test_applying_stored_stats_reproduces_fit(self):
        rng = np.random.default_rng(4)
        mats = [rng.normal(size=(12, 5)) for _ in range(4)]
        fit_out, stats = normalize(mats)
        reapplied, _ = normalize(mats, stats)
        for a, b in zip(fit_out, reapplied):
            np.testing.assert_array_equal(a, b)

    def test_stats_round_trip(self):
        stats = FeatureStats(mean=np.arange(3.0), std=np.ones(3))
        again = FeatureStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(stats.mean, again.mean)

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            normalize([])
