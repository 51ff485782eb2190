#!/usr/bin/env python3
"""Miniature three-stage training run: embedder, enhancer, joint finetune.

Uses a throwaway 3-speaker corpus so it finishes in under a minute.
Run:  python3 demos/04_training.py
"""

import tempfile
from pathlib import Path

import numpy as np

from nvl.config import RunConfig
from nvl.corpus import build_corpus
from nvl.trainer import (AblationConfig, HalvingSchedule, run_finetune,
                         run_pretrain1, run_pretrain2)
from nvl import trainer as TR

cfg = RunConfig(seed=0, train_speakers=3, test_speakers=2, train_utts_per_speaker=4,
                test_utts_per_speaker=2, duration_lo_s=1.5, duration_hi_s=2.0,
                min_train_utts_per_speaker=1, min_train_frames=100,
                enhancer_layers=1, enhancer_hidden=12, tdnn_channels=16,
                tdnn_contexts="-1,0,1;-1,0,1;0;0;0", embed_dim=16, fc2_dim=16,
                batch_utts_stage1=6, batch_pairs_stage2=4, segment_frames=60,
                lr_stage1=0.1, lr_stage2=1.0, lr_finetune=0.01, adadelta_eps=1e-2,
                max_epochs_stage1=6, max_epochs_stage2=3, max_epochs_finetune=2,
                halving_threshold=-1.0)

print("== learning-rate schedule on a scripted loss sequence ==")
schedule = HalvingSchedule(0.2, threshold=0.01)
for epoch, loss in enumerate([1.00, 0.995, 0.991], start=1):
    event = schedule.observe(loss)
    print(f"epoch {epoch}: loss {loss:.3f} -> {event:8s} (lr now {schedule.lr})")

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "corpus"
    manifest = build_corpus(cfg, root)
    print(f"\n== corpus: {len(manifest.records)} utterances ==")

    log = Path(tmp) / "stage1.log"
    ck1 = run_pretrain1(root, manifest, cfg, log_path=log)
    epochs = [line.split("\t")[5] for line in log.read_text().splitlines()
              if line.startswith("epoch")]
    print(f"stage 1 (embedder, cross entropy): {ck1.step} steps, "
          f"epoch losses {' '.join(v[:6] for v in epochs)}")

    ck2 = run_pretrain2(root, manifest, ck1, cfg, AblationConfig("c"))
    frozen = all(np.array_equal(ck1.arrays[k], ck2.arrays[k])
                 for k in ck1.arrays if k.startswith("embedder/"))
    print(f"stage 2 (enhancer vs frozen embedder): {ck2.step} steps, "
          f"embedder untouched: {frozen}")

    ck3 = run_finetune(root, manifest, ck2, cfg, AblationConfig("d"))
    moved = any(not np.array_equal(ck2.arrays[k], ck3.arrays[k])
                for k in ck2.arrays if k.startswith("embedder/"))
    print(f"stage 3 (joint finetune): {ck3.step} steps, embedder updated: {moved}")

    pairs = TR.stage2_pairs(manifest)
    batch = TR.make_batches(pairs, cfg.batch_pairs_stage2, np.random.default_rng(0))[0]
    print(f"pair batches carry k noisy + their k clean partners: "
          f"{all(n.paired_clean_id == c.utt_id for n, c in batch)}")
