"""Waveform front-end and the normalizations around the enhancement mask.

A waveform becomes a 30-bin log-Mel spectrogram (Hann 400/160, FFT 512,
16 kHz); spectrograms are standardized three ways:

  * channel normalization against corpus-level per-bin statistics, applied
    to the enhancer input, with an exact algebraic inverse applied to its
    output,
  * instance normalization (per-utterance, per-bin), applied before the
    speaker embedder; mean/variance normalization is the same operation
    here and ``mvn`` is an alias.

The corpus statistics divide by the per-bin deviation raised to a
configurable exponent p (1 = standard deviation, 2 = variance); both modes
keep the round-trip exact because the inverse uses the same denominator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
FFT_SIZE = 512
MEL_BINS = 30
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-10
EPS_GUARD = 1e-8

SPECTROGRAM_MAGIC = b"NVLSPEC1"


@dataclass
class Waveform:
    """Mono 16 kHz signal with float samples."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """T x K matrix of log-Mel features plus the framing that produced it."""

    frames: np.ndarray
    hop: int = HOP_LENGTH
    win: int = WIN_LENGTH

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != MEL_BINS:
            raise ValueError(f"spectrogram must be T x {MEL_BINS}, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ChannelStats:
    """Per-Mel-bin mean and deviation pooled over a training corpus."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(MEL_BINS)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(MEL_BINS)
        if np.any(self.sigma <= 0.0):
            raise ValueError("channel deviations must be strictly positive")


@dataclass
class Mask:
    """Multiplicative time-frequency gain in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("mask values must lie in [0, 1]")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """Triangular filters (MEL_BINS x FFT_SIZE//2+1), unit peak, 0-8 kHz."""
    mel_points = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), MEL_BINS + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(FFT_SIZE // 2 + 1) * (SAMPLE_RATE / FFT_SIZE)
    bank = np.zeros((MEL_BINS, len(fft_freqs)))
    for k in range(MEL_BINS):
        lo, center, hi = hz_points[k], hz_points[k + 1], hz_points[k + 2]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        bank[k] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def mel_centers_hz() -> np.ndarray:
    mel_points = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), MEL_BINS + 2)
    return mel_to_hz(mel_points[1:-1])


_HANN = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)  # periodic


def frame_count(num_samples: int) -> int:
    return 1 + (num_samples - WIN_LENGTH) // HOP_LENGTH


def logmel(w: Waveform) -> Spectrogram:
    """Log-Mel analysis: Hann 400/160, magnitude spectrum, 30 Mel filters."""
    n = len(w.samples)
    if n < WIN_LENGTH:
        raise ValueError(f"waveform too short: {n} samples, need at least {WIN_LENGTH}")
    t = frame_count(n)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(t)[:, None]
    frames = w.samples[idx] * _HANN
    mag = np.abs(np.fft.rfft(frames, n=FFT_SIZE, axis=1))
    mel = mag @ mel_filterbank().T
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def _denominator(stats_sigma: np.ndarray, exponent: int) -> np.ndarray:
    if exponent not in (1, 2):
        raise ValueError(f"deviation exponent must be 1 or 2, got {exponent}")
    return (stats_sigma + EPS_GUARD) ** exponent


def channel_normalize(s: Spectrogram, stats: ChannelStats, exponent: int = 1) -> Spectrogram:
    """Standardize each Mel bin against corpus statistics."""
    out = (s.frames - stats.mu) / _denominator(stats.sigma, exponent)
    return Spectrogram(out, s.hop, s.win)


def channel_inverse(s: Spectrogram, stats: ChannelStats, exponent: int = 1) -> Spectrogram:
    """Exact algebraic inverse of ``channel_normalize`` under the same stats."""
    out = s.frames * _denominator(stats.sigma, exponent) + stats.mu
    return Spectrogram(out, s.hop, s.win)


def instance_normalize(s: Spectrogram, exponent: int = 1) -> Spectrogram:
    """Per-utterance per-bin standardization; constant bins map to zero.

    The mean is removed twice: the second pass cancels the roundoff residual
    of the first, which the epsilon-guarded division would otherwise blow up
    on near-constant bins.
    """
    if s.num_frames < 2:
        raise ValueError(f"instance normalization needs at least 2 frames, got {s.num_frames}")
    centered = s.frames - np.mean(s.frames, axis=0)
    centered -= np.mean(centered, axis=0)
    sigma = np.sqrt(np.mean(centered**2, axis=0))
    out = centered / _denominator(sigma, exponent)
    return Spectrogram(out, s.hop, s.win)


def mvn(s: Spectrogram, exponent: int = 1) -> Spectrogram:
    """Mean/variance normalization for the embedder; same math as instance_normalize."""
    return instance_normalize(s, exponent)


def apply_mask(x: Spectrogram, m: Mask) -> Spectrogram:
    if x.frames.shape != m.values.shape:
        raise ValueError(
            f"mask shape {m.values.shape} does not match spectrogram shape {x.frames.shape}")
    return Spectrogram(x.frames * m.values, x.hop, x.win)


def compute_channel_stats(corpus) -> ChannelStats:
    """Pool per-bin mean and population deviation over all frames of all utterances."""
    specs = list(corpus)
    if not specs:
        raise ValueError("cannot compute channel statistics of an empty corpus")
    total = sum(s.num_frames for s in specs)
    if total < 2:
        raise ValueError(f"need at least 2 pooled frames, got {total}")
    stacked = np.concatenate([s.frames for s in specs], axis=0)
    mu = np.mean(stacked, axis=0)
    sigma = np.std(stacked, axis=0)
    return ChannelStats(mu, np.maximum(sigma, EPS_GUARD))


# -- serialization ------------------------------------------------------------------


def save_spectrogram(s: Spectrogram, path):
    """Flat binary container: magic, T and K as little-endian u32, float64 data."""
    t, k = s.frames.shape
    with open(path, "wb") as f:
        f.write(SPECTROGRAM_MAGIC)
        f.write(struct.pack("<II", t, k))
        f.write(s.frames.astype("<f8").tobytes())


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != SPECTROGRAM_MAGIC:
        raise ValueError(f"{path}: bad magic, not a spectrogram container")
    t, k = struct.unpack("<II", blob[8:16])
    expected = 16 + 8 * t * k
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated container ({len(blob)} bytes, expected {expected})")
    frames = np.frombuffer(blob[16:], dtype="<f8").reshape(t, k)
    return Spectrogram(np.array(frames))
