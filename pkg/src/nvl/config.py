"""Run configuration: a flat, validated key/value document.

The on-disk format is UTF-8 lines of ``key = value`` with ``#`` comments.
Unknown keys are rejected.  Defaults follow the reference training recipe
(batch sizes 512 / 64 pairs, learning rates 0.2 / 0.3 / 1e-4, 300-frame
segments, lambda 0.5); desk-scale runs override them through the same
document.  Every command writes its resolved configuration next to its
outputs so a run can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import Optional


class ConfigError(ValueError):
    """Configuration is malformed or inconsistent; message lists violations."""


@dataclass
class RunConfig:
    # global
    seed: int = 0

    # corpus
    train_speakers: int = 20
    test_speakers: int = 10
    train_utts_per_speaker: int = 12
    test_utts_per_speaker: int = 8
    duration_lo_s: float = 3.0
    duration_hi_s: float = 6.0
    resonances_per_speaker: int = 5
    snr_train_lo_db: float = 0.0
    snr_train_hi_db: float = 20.0
    snr_aug_lo_db: float = 10.0
    snr_aug_hi_db: float = 30.0
    snr_reject_window_db: float = 0.01
    snr_test_set_db: str = "0,5,10,15,20"
    min_train_frames: int = 250
    min_train_utts_per_speaker: int = 10

    # dsp
    sigma_exponent: int = 1

    # models
    enhancer_layers: int = 3
    enhancer_hidden: int = 128
    tdnn_channels: int = 64
    tdnn_contexts: str = "-2,-1,0,1,2;-2,0,2;-3,0,3;0;0"
    embed_dim: int = 128
    fc2_dim: int = 128

    # losses
    loss_lambda: float = 0.5
    pcptl_layer_scaling: bool = False

    # trainer
    batch_utts_stage1: int = 512
    batch_pairs_stage2: int = 64
    lr_stage1: float = 0.2
    lr_stage2: float = 0.3
    lr_finetune: float = 0.0001
    halving_threshold: float = 0.01
    max_epochs_stage1: int = 60
    max_epochs_stage2: int = 60
    max_epochs_finetune: int = 60
    segment_frames: int = 300
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6

    # eval
    trials_per_speaker: int = 20
    dcf_p_target: float = 0.05
    vad_enabled: bool = True

    def __post_init__(self):
        self.validate()

    # -- parsing ---------------------------------------------------------------

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    @classmethod
    def from_dict(cls, mapping: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in mapping.items():
            kwargs[key] = _parse_value(key, raw, known[key].type)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        mapping = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
                key, value = text.split("=", 1)
                key = key.strip()
                if key in mapping:
                    raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
                mapping[key] = value.strip()
        return cls.from_dict(mapping)

    # -- serialization -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    # -- derived views -------------------------------------------------------------

    def snr_test_values(self) -> list[float]:
        return [float(v) for v in self.snr_test_set_db.split(",") if v.strip()]

    def contexts(self) -> list[list[int]]:
        layers = []
        for part in self.tdnn_contexts.split(";"):
            offsets = sorted(int(v) for v in part.split(",") if v.strip())
            layers.append(offsets)
        return layers

    # -- validation ------------------------------------------------------------------

    def validate(self):
        problems = []
        if self.train_speakers < 2:
            problems.append("train_speakers must be >= 2")
        if self.test_speakers < 2:
            problems.append("test_speakers must be >= 2")
        if self.train_utts_per_speaker < 1 or self.test_utts_per_speaker < 2:
            problems.append("utterance counts must allow at least one enroll/test pair")
        if not (1.0 <= self.duration_lo_s <= self.duration_hi_s):
            problems.append("durations must satisfy 1 <= duration_lo_s <= duration_hi_s")
        if self.resonances_per_speaker < 2:
            problems.append("resonances_per_speaker must be >= 2")
        if not (self.snr_train_lo_db < self.snr_train_hi_db):
            problems.append("snr_train_lo_db must be below snr_train_hi_db")
        if not (self.snr_aug_lo_db < self.snr_aug_hi_db):
            problems.append("snr_aug_lo_db must be below snr_aug_hi_db")
        if self.snr_reject_window_db < 0:
            problems.append("snr_reject_window_db must be >= 0")
        try:
            test_set = self.snr_test_values()
            if not test_set:
                problems.append("snr_test_set_db must list at least one value")
        except ValueError:
            problems.append(f"snr_test_set_db is not a comma-separated float list: {self.snr_test_set_db!r}")
        if self.sigma_exponent not in (1, 2):
            problems.append("sigma_exponent must be 1 or 2")
        if self.enhancer_layers < 1 or self.enhancer_hidden < 1:
            problems.append("enhancer topology must have >= 1 layer and >= 1 hidden unit")
        try:
            ctx = self.contexts()
            if len(ctx) != 5:
                problems.append("tdnn_contexts must describe exactly 5 layers")
        except ValueError:
            problems.append(f"tdnn_contexts is malformed: {self.tdnn_contexts!r}")
        if not (0.0 <= self.loss_lambda <= 1.0):
            problems.append("loss_lambda must lie in [0, 1]")
        for name in ("lr_stage1", "lr_stage2", "lr_finetune"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.batch_utts_stage1 < 1 or self.batch_pairs_stage2 < 1:
            problems.append("batch sizes must be >= 1")
        if self.segment_frames < 2:
            problems.append("segment_frames must be >= 2")
        if not (0.0 < self.adadelta_rho < 1.0):
            problems.append("adadelta_rho must lie in (0, 1)")
        if self.adadelta_eps <= 0:
            problems.append("adadelta_eps must be > 0")
        if not (0.0 < self.dcf_p_target < 1.0):
            problems.append("dcf_p_target must lie in (0, 1)")
        if self.trials_per_speaker < 1:
            problems.append("trials_per_speaker must be >= 1")
        if problems:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(problems))


def _parse_value(key: str, raw, annotation):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = str(annotation)
    try:
        if "bool" in ann:
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in ann:
            return int(text)
        if "float" in ann:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {ann}") from None
