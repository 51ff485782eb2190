#!/usr/bin/env python3
"""The log-Mel front-end and the three normalizations around the mask.

Run:  python3 demos/02_frontend.py
"""

import numpy as np

from nvl.dsp import (ChannelStats, Mask, Spectrogram, Waveform, apply_mask,
                     channel_inverse, channel_normalize, compute_channel_stats,
                     instance_normalize, logmel, mel_centers_hz)

# A one-second 1 kHz tone at 16 kHz.
t = np.arange(16000) / 16000.0
tone = Waveform(0.25 * np.sin(2 * np.pi * 1000.0 * t))

spec = logmel(tone)
print(f"log-Mel spectrogram: {spec.num_frames} frames x {spec.frames.shape[1]} bins")
peak_bin = int(np.argmax(spec.frames.mean(axis=0)))
centers = mel_centers_hz()
print(f"energy peaks in bin {peak_bin} (center {centers[peak_bin]:.0f} Hz, "
      f"nearest center to 1 kHz is bin {int(np.argmin(np.abs(centers - 1000)))})")

# Corpus-level channel statistics, then normalize / inverse round trip.
rng = np.random.default_rng(0)
corpus = [Spectrogram(rng.standard_normal((50, 30)) * 2.0 + rng.uniform(-1, 1))
          for _ in range(10)]
stats = compute_channel_stats(corpus)
normalized = channel_normalize(spec, stats)
restored = channel_inverse(normalized, stats)
print(f"channel normalize/inverse round trip error: "
      f"{np.max(np.abs(restored.frames - spec.frames)):.2e}")

# Both deviation exponents (divide by sigma or by sigma^2) round-trip.
for exponent in (1, 2):
    back = channel_inverse(channel_normalize(spec, stats, exponent), stats, exponent)
    print(f"  exponent p={exponent}: max round-trip error "
          f"{np.max(np.abs(back.frames - spec.frames)):.2e}")

# Instance normalization: per-utterance, per-bin.
inst = instance_normalize(spec)
print(f"instance-normalized per-bin means, max |mean|: "
      f"{np.max(np.abs(inst.frames.mean(axis=0))):.2e}")

# Masking: elementwise gain in [0, 1].
mask = Mask(rng.uniform(0.0, 1.0, spec.frames.shape))
masked = apply_mask(spec, mask)
print(f"masking preserves shape: {masked.frames.shape == spec.frames.shape}, "
      f"all |masked| <= |input|: "
      f"{bool(np.all(np.abs(masked.frames) <= np.abs(spec.frames) + 1e-12))}")
