"""Command-line workflow: corpus generation, staged training, evaluation.

Subcommands: gen-corpus, train, evaluate, extract, ablate, report.
Exit codes: 0 success, 1 validation problem, 2 runtime failure.  Errors
print one machine-parsable ``error: ...`` line on stderr.  All randomness
hangs off a single seed (--seed flag, else NVL_SEED, else the config);
every command writes its resolved config next to its outputs and refuses
to clobber existing outputs unless --force is given.
"""

from __future__ import annotations

import argparse
import os
import sys
import wave
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import trainer as TR
from .config import ConfigError, RunConfig
from .corpus import Manifest, build_corpus, read_wav
from .models import IntegrityError, load_checkpoint


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    elif os.environ.get("NVL_SEED") and not getattr(args, "config", None):
        cfg.seed = int(os.environ["NVL_SEED"])
    return cfg


def _guard_output(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; rerun with --force to overwrite")


def _load_manifest(manifest_dir) -> Manifest:
    path = Path(manifest_dir) / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}; run gen-corpus first")
    return Manifest.read(path)


# -- subcommands ------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    manifest = build_corpus(cfg, out, force=args.force)
    counts: dict[str, int] = {}
    for r in manifest.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    print(f"corpus written to {out} ({len(manifest.records)} utterances)")
    for split in sorted(counts):
        print(f"  {split}: {counts[split]}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    _guard_output(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log")
    system = TR.AblationConfig(args.ablation)

    if args.stage == "pretrain1":
        ckpt = TR.run_pretrain1(args.manifest, manifest, cfg, out, log_path)
    elif args.stage == "pretrain2":
        if not args.embedder_ckpt:
            raise FileNotFoundError("pretrain2 requires --embedder-ckpt from stage pretrain1")
        base = load_checkpoint(args.embedder_ckpt)
        ckpt = TR.run_pretrain2(args.manifest, manifest, base, cfg, system, out, log_path)
    elif args.stage == "finetune":
        if not args.checkpoint:
            raise FileNotFoundError("finetune requires --checkpoint from stage pretrain2")
        base = load_checkpoint(args.checkpoint)
        ckpt = TR.run_finetune(args.manifest, manifest, base, cfg, system, out, log_path)
    else:
        raise ConfigError(f"unknown stage {args.stage!r}")

    cfg.to_file(out.parent / f"{out.stem}.config.txt")
    print(f"stage {args.stage} finished after {ckpt.step} steps; checkpoint at {out}")
    tail = [line for line in log_path.read_text(encoding="utf-8").splitlines()
            if line.startswith("epoch")]
    if tail:
        print(f"final epoch record: {tail[-1]}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    report_path = out / "report.txt"
    _guard_output(report_path, args.force)
    out.mkdir(parents=True, exist_ok=True)

    ckpt = load_checkpoint(args.checkpoint)
    system = E.system_from_checkpoint(ckpt, cfg, baseline=args.baseline)
    if args.trials:
        trials = E.load_trials(args.trials)
    else:
        trials = E.build_trials(manifest, cfg.trials_per_speaker, cfg.seed)
    E.save_trials(out / "trials.tsv", trials)

    conditions = ("clean", "noisy") if args.condition == "both" else (args.condition,)
    system_name = ("baseline" if args.baseline else ckpt.stage)
    entries = []
    for condition in conditions:
        scores = E.score_trials(system, args.manifest, manifest, trials, condition, cfg)
        E.save_scores(out / f"scores_{condition}.tsv", scores)
        entries.append({
            "system": system_name,
            "condition": condition,
            "eer": E.eer(scores),
            "min_dcf": E.min_dcf(scores, cfg.dcf_p_target),
            "trials": len(trials),
            "config_hash": cfg.content_hash(),
            "checkpoint_sha256": E.file_sha256(args.checkpoint),
        })
    E.write_report(report_path, entries)
    cfg.to_file(out / "eval.config.txt")
    for e in entries:
        print(f"{e['system']} {e['condition']}: EER {100*e['eer']:.3f}% "
              f"minDCF {e['min_dcf']:.4f}")
    print(f"report written to {report_path}")
    return 0


def cmd_extract(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _guard_output(out, args.force)
    ckpt = load_checkpoint(args.checkpoint)
    system = E.system_from_checkpoint(ckpt, cfg, baseline=args.baseline)
    waveform = read_wav(args.wav)
    embedding = system.embed_waveform(waveform, vad=cfg.vad_enabled)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for value in embedding:
            f.write(repr(float(value)) + "\n")
    print(f"embedding ({len(embedding)} dims) written to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    report_path = out / "ablation_report.txt"
    _guard_output(report_path, args.force)
    out.mkdir(parents=True, exist_ok=True)

    pretrain1 = load_checkpoint(args.pretrain1) if args.pretrain1 else None
    systems = tuple(args.systems)
    results = TR.run_ablation(args.manifest, manifest, cfg, out, pretrain1, systems)
    entries = []
    for name in systems:
        for condition in ("clean", "noisy"):
            r = results[name][condition]
            entries.append({
                "system": name, "condition": condition, "eer": r["eer"],
                "min_dcf": r["min_dcf"], "trials": r["trials"],
                "config_hash": cfg.content_hash(),
                "checkpoint_sha256": E.file_sha256(out / f"system_{name}.ckpt"),
            })
    E.write_report(report_path, entries)
    cfg.to_file(out / "ablation.config.txt")
    for e in entries:
        print(f"system ({e['system']}) {e['condition']}: EER {100*e['eer']:.3f}% "
              f"minDCF {e['min_dcf']:.4f}")
    return 0


def cmd_report(args) -> int:
    cfg = _resolve_config(args)
    trials = E.load_trials(args.trials)
    by_pair = {(t.enroll_utt, t.test_utt): t for t in trials}
    scored, values = [], []
    with open(args.scores, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            enroll, test, score = line.split("\t")
            trial = by_pair.get((enroll, test))
            if trial is None:
                raise ConfigError(f"scored pair ({enroll}, {test}) is not in the trial list")
            scored.append(trial)
            values.append(float(score))
    scores = E.ScoreSet(scored, np.array(values))
    entry = {
        "system": args.system, "condition": args.condition,
        "eer": E.eer(scores), "min_dcf": E.min_dcf(scores, cfg.dcf_p_target),
        "trials": len(scored), "config_hash": cfg.content_hash(),
    }
    if args.out:
        _guard_output(Path(args.out), args.force)
        E.write_report(args.out, [entry])
    print(f"{entry['system']} {entry['condition']}: EER {100*entry['eer']:.3f}% "
          f"minDCF {entry['min_dcf']:.4f} over {entry['trials']} trials")
    return 0


# -- argument plumbing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvl",
        description="Noise-robust speaker representation: corpus, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False):
        p.add_argument("--config", help="path to a key = value config document")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if manifest:
            p.add_argument("--manifest", required=True, help="corpus directory with manifest.tsv")

    p = sub.add_parser("gen-corpus", help="synthesize the corpus and manifest")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run one training stage")
    common(p, manifest=True)
    p.add_argument("--stage", required=True, choices=("pretrain1", "pretrain2", "finetune"))
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--embedder-ckpt", help="pretrain1 checkpoint (stage pretrain2)")
    p.add_argument("--checkpoint", help="pretrain2 checkpoint (stage finetune)")
    p.add_argument("--ablation", default="d", choices=("a", "b", "c", "d"),
                   help="objective variant for paired stages")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score verification trials from a checkpoint")
    common(p, manifest=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", default="both", choices=("clean", "noisy", "both"))
    p.add_argument("--trials", help="existing trials file (default: build from manifest)")
    p.add_argument("--baseline", action="store_true", help="bypass the enhancement module")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", help="write the embedding of one WAV file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--baseline", action="store_true", help="bypass the enhancement module")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("ablate", help="run systems a-d and report metrics")
    common(p, manifest=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--systems", default="abcd", help="subset of 'abcd' to run")
    p.add_argument("--pretrain1", help="reuse an existing pretrain1 checkpoint")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="recompute metrics from scores and trials files")
    common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--system", default="unknown")
    p.add_argument("--condition", default="unknown")
    p.add_argument("--out", help="optional report output path")
    p.set_defaults(func=cmd_report)
    return parser


VALIDATION_ERRORS = (ConfigError, FileExistsError, FileNotFoundError, KeyError,
                     ValueError, wave.Error)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
