"""MFCC front end: 13 cepstral coefficients plus first and second deltas.

Fixed recipe so outputs are bit-reproducible: 20 ms Hann-windowed frames with
10 ms hop, FFT size the next power of two at or above the frame length,
40 triangular mel filters (HTK scale, 0 Hz to Nyquist), log floored at 1e-10,
orthonormal DCT-II, first 13 coefficients kept as-is (c0 stays a plain
cepstral coefficient, not log energy). No pre-emphasis. Deltas use the
standard regression window (width 2) with edge replication; the second
derivative is the delta of the delta. All parameters are recorded in dataset
metadata by the callers.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError

N_MELS = 40
N_COEFFS = 13
LOG_FLOOR = 1e-10
FEATURE_DIM = 3 * N_COEFFS

FEATURE_PARAMS = {
    "frame_ms": 20,
    "hop_ms": 10,
    "n_mels": N_MELS,
    "n_coeffs": N_COEFFS,
    "window": "hann",
    "mel_scale": "htk",
    "log_floor": LOG_FLOOR,
    "delta_width": 2,
    "pre_emphasis": 0.0,
}


@dataclass
class Waveform:
    samples: np.ndarray  # mono, floats in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.samples.size == 0:
            raise DataError("empty waveform")
        if self.sample_rate <= 0:
            raise DataError(f"bad sample rate {self.sample_rate}")


def read_wav(path) -> Waveform:
    """Load 16-bit PCM mono RIFF/WAVE; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, "
                                f"got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, "
                                f"got {8 * wf.getsampwidth()}-bit")
            if wf.getcomptype() != "NONE":
                raise DataError(f"{path}: compressed WAV not supported")
            n = wf.getnframes()
            raw = wf.readframes(n)
            if len(raw) != 2 * n:
                raise DataError(f"{path}: truncated WAV payload")
            rate = wf.getframerate()
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, w: Waveform):
    """Inverse of read_wav for values representable in 16-bit PCM."""
    ints = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(ints.tobytes())


def frame_signal(w: Waveform, frame_ms: int = 20, hop_ms: int = 10) -> np.ndarray:
    """Slice into overlapping frames; the tail remainder is dropped.

    Frame length and hop are round(ms * rate / 1000); the frame count is
    1 + floor((N - frame_len) / hop).
    """
    flen = int(round(frame_ms * w.sample_rate / 1000))
    hop = int(round(hop_ms * w.sample_rate / 1000))
    n = w.samples.shape[0]
    if n < flen:
        raise DataError(f"signal of {n} samples shorter than one "
                        f"{flen}-sample frame")
    count = 1 + (n - flen) // hop
    frames = np.empty((count, flen))
    for i in range(count):
        frames[i] = w.samples[i * hop: i * hop + flen]
    return frames


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sr: int, nfft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters with break points equally spaced on the mel scale.

    Continuous triangles evaluated at the FFT bin centres (no bin snapping),
    so every bin strictly between the first and last break point has positive
    total weight.
    """
    break_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2),
                                     n_mels + 2))
    bins_hz = np.arange(nfft // 2 + 1) * (sr / nfft)
    fb = np.zeros((n_mels, nfft // 2 + 1))
    for j in range(n_mels):
        left, centre, right = break_hz[j], break_hz[j + 1], break_hz[j + 2]
        rising = (bins_hz - left) / (centre - left)
        falling = (right - bins_hz) / (right - centre)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (rows are basis vectors); M M^T = I."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * m + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


def mfcc(frames: np.ndarray, sr: int, n_mels: int = N_MELS,
         n_coeffs: int = N_COEFFS) -> np.ndarray:
    """Cepstra per frame: Hann window, power spectrum, log-mel, DCT-II."""
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DataError(f"need a non-empty [T, frame_len] array, got "
                        f"{frames.shape}")
    flen = frames.shape[1]
    nfft = _next_pow2(flen)
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(flen) / (flen - 1)))
    spectrum = np.abs(np.fft.rfft(frames * window, nfft)) ** 2
    fb = mel_filterbank(sr, nfft, n_mels)
    mel_energy = np.log(np.maximum(spectrum @ fb.T, LOG_FLOOR))
    return mel_energy @ dct_matrix(n_mels)[:n_coeffs].T


def deltas(c: np.ndarray, width: int = 2):
    """Regression deltas with edge replication; returns (delta, delta-delta).

    delta[t] = sum_k k * (c[t+k] - c[t-k]) / (2 * sum_k k^2), k = 1..width.
    """
    if c.ndim != 2 or c.shape[0] < 1:
        raise DataError(f"need a non-empty [T, D] array, got {c.shape}")
    t_len = c.shape[0]
    denom = 2.0 * sum(k * k for k in range(1, width + 1))
    d = np.zeros_like(c)
    for k in range(1, width + 1):
        plus = c[np.minimum(np.arange(t_len) + k, t_len - 1)]
        minus = c[np.maximum(np.arange(t_len) - k, 0)]
        d += k * (plus - minus)
    d /= denom
    dd = np.zeros_like(d)
    for k in range(1, width + 1):
        plus = d[np.minimum(np.arange(t_len) + k, t_len - 1)]
        minus = d[np.maximum(np.arange(t_len) - k, 0)]
        dd += k * (plus - minus)
    dd /= denom
    return d, dd


def featurize_waveform(w: Waveform) -> np.ndarray:
    """Full [T, 39] feature matrix for one utterance (un-normalized)."""
    c = mfcc(frame_signal(w), w.sample_rate)
    d, dd = deltas(c)
    return np.concatenate([c, d, dd], axis=1)


@dataclass
class FeatureStats:
    mean: np.ndarray  # [D]
    std: np.ndarray   # [D], floored at 1e-6

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "FeatureStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


def normalize(features_list, stats: FeatureStats | None = None):
    """Z-normalize per dimension over the whole corpus.

    Without ``stats`` the statistics are fitted on the given matrices
    (training corpus) and returned for later application to validation/test
    data. Std is floored at 1e-6 so constant dimensions map to zero.
    """
    features_list = list(features_list)
    if not features_list or sum(f.shape[0] for f in features_list) == 0:
        raise DataError("cannot normalize an empty corpus")
    if stats is None:
        stacked = np.concatenate(features_list, axis=0)
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), 1e-6)
        stats = FeatureStats(mean=mean, std=std)
    normalized = [(f - stats.mean) / stats.std for f in features_list]
    return normalized, stats
