#!/usr/bin/env python3
"""Build a miniature corpus and verify its construction guarantees.

Run:  python3 demos/03_corpus.py
"""

import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from nvl.config import RunConfig
from nvl.corpus import (build_corpus, measured_snr_db, mixing_base_id,
                        read_wav_int, synth_noise)

cfg = RunConfig(seed=7, train_speakers=4, test_speakers=2, train_utts_per_speaker=4,
                test_utts_per_speaker=2, duration_lo_s=1.5, duration_hi_s=2.5,
                min_train_utts_per_speaker=1, min_train_frames=100)

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "corpus"
    manifest = build_corpus(cfg, root)
    print(f"built {len(manifest.records)} utterances for "
          f"{manifest.speaker_count} speakers under {root}")
    print("records per split:", dict(Counter(r.split for r in manifest.records)))

    # Every noisy file carries its advertised SNR, measured from the files.
    worst = 0.0
    for rec in manifest.records:
        if rec.snr_db is None:
            continue
        base = read_wav_int(root / manifest.record(mixing_base_id(rec)).path)
        noisy = read_wav_int(root / rec.path)
        worst = max(worst, abs(measured_snr_db(base, noisy) - rec.snr_db))
    print(f"max |measured - manifest| SNR over all mixes: {worst:.2e} dB")

    # Pairing: noisy minus its stored noise reproduces the clean member.
    noisy_rec = manifest.by_split("train_noisy")[0]
    clean = read_wav_int(root / manifest.record(noisy_rec.paired_clean_id).path)
    noisy = read_wav_int(root / noisy_rec.path)
    print(f"additive pairing exact: {bool(np.all((noisy - (noisy - clean)) == clean))}")

    # Train SNR policy avoids the test grid; test SNRs live on it.
    grid = set(cfg.snr_test_values())
    train_snrs = [r.snr_db for r in manifest.records
                  if r.split.startswith("train") and r.snr_db is not None]
    test_snrs = [r.snr_db for r in manifest.by_split("test_noisy")]
    print(f"train SNRs off the grid: {all(s not in grid for s in train_snrs)}")
    print(f"test SNRs on the grid:   {all(s in grid for s in test_snrs)}")

print("\nnoise flavours are unit power:")
for kind in ("white", "pink", "tonal", "babble"):
    w = synth_noise(kind, 1.0, seed=1)
    print(f"  {kind:7s} mean square = {np.mean(w.samples**2):.9f}")
