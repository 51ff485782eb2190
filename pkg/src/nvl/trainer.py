"""Staged training: embedder pretraining, enhancer pretraining, joint finetune.

Stage layout (datasets refer to manifest splits):

  pretrain1   train_clean_aug, cross entropy only, SGD, trains the embedder
  pretrain2   (noisy, clean) pairs from train_noisy and train_noisy_aug with
              their manifest-paired targets, Adadelta, embedder frozen
  finetune    same data and loss as pretrain2, both modules trainable,
              small initial learning rate

The learning rate halves whenever the per-epoch loss decrease ratio
(loss[e-1] - loss[e]) / loss[e-1] falls below a threshold, and training
stops after two halvings in a row.

Ablation systems share one pretrained embedder and differ in the stage-2
objective:

  a   cross entropy on the noisy branch only
  b   original perceptual loss (clean reference bypasses the enhancer,
      gradients flow through the noisy branch only)
  c   combined loss, both branches through the enhancer
  d   system c followed by joint finetune

Noisy/clean partners are always clipped at the same frame offset so the
tap activations stay frame-aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import losses as L
from . import tensor as T
from .config import RunConfig
from .corpus import Manifest, UtteranceRecord, load_utterance
from .dsp import ChannelStats, Spectrogram, compute_channel_stats, instance_normalize, logmel
from .models import (Checkpoint, Embedder, Enhancer, channel_inverse_graph,
                     instance_normalize_graph, load_checkpoint, load_params_into,
                     params_checksum, save_checkpoint)
from .tensor import Tensor


# -- learning-rate schedule -----------------------------------------------------------


class HalvingSchedule:
    """Halve on a too-small per-epoch loss decrease; stop after two in a row."""

    def __init__(self, lr0: float, threshold: float = 0.01):
        if lr0 < 0:
            raise ValueError("initial learning rate must be >= 0")
        self.lr = lr0
        self.threshold = threshold
        self.halvings = 0          # total halvings, never decreases
        self.halvings_in_row = 0
        self.prev_loss: Optional[float] = None
        self.stopped = False

    def observe(self, epoch_loss: float) -> str:
        """Feed the epoch-mean training loss; returns continue|halved|stopped."""
        if self.stopped:
            raise RuntimeError("schedule already stopped")
        if self.prev_loss is None:
            self.prev_loss = epoch_loss
            return "continue"
        ratio = (self.prev_loss - epoch_loss) / self.prev_loss
        self.prev_loss = epoch_loss
        if ratio < self.threshold:
            self.lr /= 2.0
            self.halvings += 1
            self.halvings_in_row += 1
            if self.halvings_in_row >= 2:
                self.stopped = True
                return "stopped"
            return "halved"
        self.halvings_in_row = 0
        return "continue"


# -- optimizers ------------------------------------------------------------------------


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("NaN or infinite gradient in SGD step")
    return param - lr * grad


def adadelta_step(param: np.ndarray, grad: np.ndarray, state: tuple,
                  lr: float, rho: float = 0.95, eps: float = 1e-6):
    """Accumulate-RMS update; returns (new param, new state).

    state is (E[g^2], E[dx^2]); lr acts as a scale factor on the update.
    """
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("NaN or infinite gradient in Adadelta step")
    acc_grad, acc_update = state
    acc_grad = rho * acc_grad + (1.0 - rho) * grad * grad
    update = -np.sqrt(acc_update + eps) / np.sqrt(acc_grad + eps) * grad
    acc_update = rho * acc_update + (1.0 - rho) * update * update
    return param + lr * update, (acc_grad, acc_update)


class Optimizer:
    """Applies SGD or Adadelta over a named parameter dict, tracking state."""

    KINDS = ("sgd", "adadelta")

    def __init__(self, kind: str, lr: float, rho: float = 0.95, eps: float = 1e-6):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.state: dict[str, tuple] = {}
        self.steps = 0

    def step(self, params: dict[str, Tensor]):
        for name, p in params.items():
            if p.grad is None:
                continue
            if self.kind == "sgd":
                p.data = sgd_step(p.data, p.grad, self.lr)
            else:
                st = self.state.get(name)
                if st is None:
                    st = (np.zeros_like(p.data), np.zeros_like(p.data))
                p.data, st = adadelta_step(p.data, p.grad, st, self.lr, self.rho, self.eps)
                self.state[name] = st
            p.zero_grad()
        self.steps += 1

    def state_arrays(self, halvings: int = 0) -> dict[str, np.ndarray]:
        kind_code = float(self.KINDS.index(self.kind))
        arrays = {"optim/meta": np.array([kind_code, self.lr, float(halvings), float(self.steps)])}
        for name, (acc_grad, acc_update) in self.state.items():
            arrays[f"optim/{name}/acc_grad"] = acc_grad
            arrays[f"optim/{name}/acc_update"] = acc_update
        return arrays


# -- stage plans and ablation systems ----------------------------------------------------


@dataclass
class StagePlan:
    stage: str
    datasets: tuple
    losses: tuple
    trainable: str
    optimizer: str
    lr: float
    batch: int

    def __post_init__(self):
        if self.stage == "pretrain1" and (self.trainable != "embedder" or self.losses != ("ce",)):
            raise ValueError("pretrain1 trains the embedder on cross entropy only")
        if self.stage == "pretrain2" and self.trainable != "enhancer":
            raise ValueError("pretrain2 freezes the embedder")
        if self.stage == "finetune" and self.trainable != "both":
            raise ValueError("finetune trains both modules")


@dataclass
class AblationConfig:
    """Which objective drives stage 2, and whether a finetune stage follows."""

    system: str

    def __post_init__(self):
        if self.system not in ("a", "b", "c", "d"):
            raise ValueError(f"unknown ablation system {self.system!r}")

    @property
    def use_ce(self) -> bool:
        return self.system in ("a", "c", "d")

    @property
    def ce_on_clean(self) -> bool:
        return self.system in ("c", "d")

    @property
    def pcptl(self) -> str:
        return {"a": "none", "b": "original", "c": "modified", "d": "modified"}[self.system]

    @property
    def joint_finetune(self) -> bool:
        return self.system == "d"


# -- data plumbing ---------------------------------------------------------------------


class FeatureStore:
    """Per-utterance log-Mel cache over a manifest."""

    def __init__(self, manifest_dir, manifest: Manifest):
        self.manifest_dir = Path(manifest_dir)
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def frames(self, utt_id: str) -> np.ndarray:
        cached = self._cache.get(utt_id)
        if cached is None:
            record = self.manifest.record(utt_id)
            cached = logmel(load_utterance(self.manifest_dir, record)).frames
            self._cache[utt_id] = cached
        return cached


def stage2_pairs(manifest: Manifest) -> list[tuple[UtteranceRecord, UtteranceRecord]]:
    """(noisy, clean-target) pairs per the manifest's pairing columns."""
    pairs = []
    for split in ("train_noisy", "train_noisy_aug"):
        for rec in manifest.by_split(split):
            if rec.paired_clean_id is None:
                raise ValueError(f"{rec.utt_id}: unpaired noisy utterance")
            pairs.append((rec, manifest.record(rec.paired_clean_id)))
    return pairs


def make_batches(items: list, size: int, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(items))
    shuffled = [items[i] for i in order]
    return [shuffled[i:i + size] for i in range(0, len(shuffled), size)]


def sample_segment(frames: np.ndarray, seg_len: int, rng: np.random.Generator) -> np.ndarray:
    if frames.shape[0] <= seg_len:
        return frames
    offset = int(rng.integers(0, frames.shape[0] - seg_len + 1))
    return frames[offset:offset + seg_len]


def sample_pair_segments(noisy: np.ndarray, clean: np.ndarray, seg_len: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Clip both pair members at the same offset (tap alignment needs it)."""
    frames = min(noisy.shape[0], clean.shape[0])
    if frames <= seg_len:
        return noisy[:frames], clean[:frames]
    offset = int(rng.integers(0, frames - seg_len + 1))
    return noisy[offset:offset + seg_len], clean[offset:offset + seg_len]


# -- logging ---------------------------------------------------------------------------


class TrainLog:
    """Line-delimited step and epoch records; deterministic formatting."""

    COLUMNS = "kind\tstage\tepoch\tstep\tlr\ttotal\tpcptl\tce_noisy\tce_clean"

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
            self._fh.write(f"# {self.COLUMNS}\n")
        self.last_epoch_loss: Optional[float] = None

    @staticmethod
    def _fmt(value) -> str:
        return repr(float(value)) if value is not None else "-"

    def step(self, stage, epoch, step, lr, loss: L.LossValue):
        if self._fh:
            comps = loss.components
            self._fh.write("\t".join([
                "step", stage, str(epoch), str(step), self._fmt(lr), self._fmt(loss.total),
                self._fmt(comps.get("pcptl")), self._fmt(comps.get("ce_noisy")),
                self._fmt(comps.get("ce_clean")),
            ]) + "\n")

    def epoch(self, stage, epoch, lr, mean_loss, event):
        self.last_epoch_loss = mean_loss
        if self._fh:
            self._fh.write("\t".join([
                "epoch", stage, str(epoch), event, self._fmt(lr), self._fmt(mean_loss),
                "-", "-", "-",
            ]) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# -- forward passes -----------------------------------------------------------------------


def _np_channel_normalize(frames: np.ndarray, stats: ChannelStats, exponent: int) -> np.ndarray:
    from .dsp import EPS_GUARD
    return (frames - stats.mu) / ((stats.sigma + EPS_GUARD) ** exponent)


def enhanced_branch(enhancer: Enhancer, embedder: Embedder, frames: np.ndarray,
                    stats_noisy: ChannelStats, stats_clean: ChannelStats, exponent: int):
    """Full differentiable chain: normalize, mask, invert, renormalize, embed."""
    x = Tensor(_np_channel_normalize(frames, stats_noisy, exponent))
    _, masked = enhancer.forward(x)
    restored = channel_inverse_graph(masked, stats_clean, exponent)
    normalized = instance_normalize_graph(restored, exponent)
    return embedder.forward(normalized)


def plain_branch(embedder: Embedder, frames: np.ndarray, exponent: int):
    """Embedder without enhancement (baseline and clean-reference path)."""
    s = instance_normalize(Spectrogram(frames), exponent)
    return embedder.forward(Tensor(s.frames))


# -- stage runners -----------------------------------------------------------------------


def _mean_loss(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _check_finite(value: float, stage: str, step: int):
    if not math.isfinite(value):
        raise RuntimeError(f"{stage}: loss diverged (non-finite) at step {step}")


def run_pretrain1(manifest_dir, manifest: Manifest, cfg: RunConfig,
                  out_path=None, log_path=None) -> Checkpoint:
    """Train the embedder on augmented clean data with cross entropy."""
    train_speakers = sorted(manifest.speakers_of(("train_clean",)))
    embedder = Embedder(
        channels=cfg.tdnn_channels, contexts=cfg.contexts(), embed_dim=cfg.embed_dim,
        fc2_dim=cfg.fc2_dim, n_speakers=len(train_speakers), seed=cfg.seed)
    store = FeatureStore(manifest_dir, manifest)
    records = manifest.by_split("train_clean_aug")
    if not records:
        raise ValueError("manifest has no train_clean_aug records")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 301]))
    schedule = HalvingSchedule(cfg.lr_stage1, cfg.halving_threshold)
    opt = Optimizer("sgd", schedule.lr)
    log = TrainLog(log_path)
    step = 0
    try:
        for epoch in range(1, cfg.max_epochs_stage1 + 1):
            epoch_losses = []
            for batch in make_batches(records, cfg.batch_utts_stage1, rng):
                terms = []
                for rec in batch:
                    seg = sample_segment(store.frames(rec.utt_id), cfg.segment_frames, rng)
                    _, logits, _ = plain_branch(embedder, seg, cfg.sigma_exponent)
                    terms.append(L.cross_entropy(logits, rec.speaker_id))
                batch_loss = _mean_loss(terms)
                value = batch_loss.item()
                _check_finite(value, "pretrain1", step)
                batch_loss.backward()
                opt.lr = schedule.lr
                opt.step(embedder.parameters())
                step += 1
                epoch_losses.append(value)
                log.step("pretrain1", epoch, step, schedule.lr,
                         L.LossValue(value, {"ce_noisy": value}))
            mean = float(np.mean(epoch_losses))
            event = schedule.observe(mean)
            log.epoch("pretrain1", epoch, schedule.lr, mean, event)
            if schedule.stopped:
                break
    finally:
        log.close()

    arrays = {name: p.data for name, p in embedder.parameters().items()}
    arrays.update(opt.state_arrays(schedule.halvings))
    arrays["meta/n_speakers"] = np.array([float(len(train_speakers))])
    ckpt = Checkpoint("pretrain1", cfg.content_hash(), step, arrays)
    if out_path is not None:
        save_checkpoint(out_path, ckpt)
    return ckpt


def _build_embedder_from(ckpt: Checkpoint, cfg: RunConfig) -> Embedder:
    n_speakers = int(ckpt.arrays["meta/n_speakers"][0])
    embedder = Embedder(
        channels=cfg.tdnn_channels, contexts=cfg.contexts(), embed_dim=cfg.embed_dim,
        fc2_dim=cfg.fc2_dim, n_speakers=n_speakers, seed=cfg.seed)
    load_params_into(embedder, ckpt.arrays, "embedder/")
    return embedder


def _build_enhancer_from(ckpt: Checkpoint, cfg: RunConfig) -> Enhancer:
    enhancer = Enhancer(hidden=cfg.enhancer_hidden, layers=cfg.enhancer_layers, seed=cfg.seed)
    load_params_into(enhancer, ckpt.arrays, "enhancer/")
    return enhancer


def compute_stage2_stats(store: FeatureStore, manifest: Manifest,
                         pairs) -> tuple[ChannelStats, ChannelStats]:
    """Noisy stats over enhancer inputs, clean stats over their targets."""
    noisy_specs = [Spectrogram(store.frames(n.utt_id)) for n, _ in pairs]
    target_ids = sorted({c.utt_id for _, c in pairs})
    clean_specs = [Spectrogram(store.frames(u)) for u in target_ids]
    return compute_channel_stats(noisy_specs), compute_channel_stats(clean_specs)


def _pair_batch_loss(enhancer, embedder, store, batch, system: AblationConfig,
                     cfg: RunConfig, stats_noisy, stats_clean, rng):
    """Combined loss over one batch of (noisy, clean) pairs."""
    pcptl_terms, ce_noisy_terms, ce_clean_terms = [], [], []
    for noisy_rec, clean_rec in batch:
        noisy_seg, clean_seg = sample_pair_segments(
            store.frames(noisy_rec.utt_id), store.frames(clean_rec.utt_id),
            cfg.segment_frames, rng)
        _, logits_n, taps_n = enhanced_branch(
            enhancer, embedder, noisy_seg, stats_noisy, stats_clean, cfg.sigma_exponent)
        if system.pcptl == "original":
            _, _, taps_c = plain_branch(embedder, clean_seg, cfg.sigma_exponent)
            pcptl_terms.append(L.perceptual_original(
                taps_n, taps_c, cfg.pcptl_layer_scaling))
        elif system.pcptl == "modified" or system.ce_on_clean:
            _, logits_c, taps_c = enhanced_branch(
                enhancer, embedder, clean_seg, stats_noisy, stats_clean, cfg.sigma_exponent)
            if system.pcptl == "modified":
                pcptl_terms.append(L.perceptual_modified(
                    taps_n, taps_c, cfg.pcptl_layer_scaling))
            if system.ce_on_clean:
                ce_clean_terms.append(L.cross_entropy(logits_c, clean_rec.speaker_id))
        if system.use_ce:
            ce_noisy_terms.append(L.cross_entropy(logits_n, noisy_rec.speaker_id))

    components = {}
    pcptl = None
    if pcptl_terms:
        pcptl = _mean_loss(pcptl_terms)
        components["pcptl"] = pcptl.item()
    ce = None
    if ce_noisy_terms:
        ce_n = _mean_loss(ce_noisy_terms)
        components["ce_noisy"] = ce_n.item()
        if ce_clean_terms:
            ce_c = _mean_loss(ce_clean_terms)
            components["ce_clean"] = ce_c.item()
            ce = (ce_n + ce_c) * 0.5  # both-branch CE, equal weight
        else:
            ce = ce_n

    if pcptl is not None and ce is not None:
        total = L.combined(pcptl, ce, cfg.loss_lambda)
    elif pcptl is not None:
        total = pcptl
    elif ce is not None:
        total = ce
    else:
        raise ValueError(f"system {system.system!r} defines no loss terms")
    return total, components


def _run_pair_stage(stage: str, manifest_dir, manifest, cfg: RunConfig,
                    enhancer: Enhancer, embedder: Embedder, system: AblationConfig,
                    lr0: float, max_epochs: int, out_path, log_path,
                    freeze_embedder: bool) -> Checkpoint:
    store = FeatureStore(manifest_dir, manifest)
    pairs = stage2_pairs(manifest)
    stats_noisy, stats_clean = compute_stage2_stats(store, manifest, pairs)

    if freeze_embedder:
        for p in embedder.parameters().values():
            p.requires_grad = False
        trainable = dict(enhancer.parameters())
    else:
        trainable = dict(enhancer.parameters())
        trainable.update(embedder.parameters())

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 302 if stage == "pretrain2" else 303]))
    schedule = HalvingSchedule(lr0, cfg.halving_threshold)
    opt = Optimizer("adadelta", schedule.lr, cfg.adadelta_rho, cfg.adadelta_eps)
    log = TrainLog(log_path)
    step = 0
    try:
        for epoch in range(1, max_epochs + 1):
            epoch_losses = []
            for batch in make_batches(pairs, cfg.batch_pairs_stage2, rng):
                total, components = _pair_batch_loss(
                    enhancer, embedder, store, batch, system, cfg,
                    stats_noisy, stats_clean, rng)
                value = total.item()
                _check_finite(value, stage, step)
                total.backward()
                opt.lr = schedule.lr
                opt.step(trainable)
                step += 1
                epoch_losses.append(value)
                log.step(stage, epoch, step, schedule.lr, L.LossValue(value, components))
            mean = float(np.mean(epoch_losses))
            event = schedule.observe(mean)
            log.epoch(stage, epoch, schedule.lr, mean, event)
            if schedule.stopped:
                break
    finally:
        log.close()
        if freeze_embedder:
            for p in embedder.parameters().values():
                p.requires_grad = True

    arrays = {name: p.data for name, p in enhancer.parameters().items()}
    arrays.update({name: p.data for name, p in embedder.parameters().items()})
    arrays.update(opt.state_arrays(schedule.halvings))
    arrays["meta/n_speakers"] = np.array([float(embedder.n_speakers)])
    arrays["stats/mu_noisy"] = stats_noisy.mu
    arrays["stats/sigma_noisy"] = stats_noisy.sigma
    arrays["stats/mu_clean"] = stats_clean.mu
    arrays["stats/sigma_clean"] = stats_clean.sigma
    ckpt = Checkpoint(stage, cfg.content_hash(), step, arrays)
    if out_path is not None:
        save_checkpoint(out_path, ckpt)
    return ckpt


def run_pretrain2(manifest_dir, manifest: Manifest, embedder_ckpt: Checkpoint,
                  cfg: RunConfig, system: AblationConfig = AblationConfig("c"),
                  out_path=None, log_path=None) -> Checkpoint:
    """Train the enhancer against the frozen embedder on paired data."""
    embedder = _build_embedder_from(embedder_ckpt, cfg)
    frozen_before = params_checksum(embedder.parameters())
    enhancer = Enhancer(hidden=cfg.enhancer_hidden, layers=cfg.enhancer_layers, seed=cfg.seed)
    ckpt = _run_pair_stage(
        "pretrain2", manifest_dir, manifest, cfg, enhancer, embedder, system,
        cfg.lr_stage2, cfg.max_epochs_stage2, out_path, log_path, freeze_embedder=True)
    if params_checksum(embedder.parameters()) != frozen_before:
        raise RuntimeError("pretrain2 modified the frozen embedder")
    return ckpt


def run_finetune(manifest_dir, manifest: Manifest, both_ckpt: Checkpoint,
                 cfg: RunConfig, system: AblationConfig = AblationConfig("d"),
                 out_path=None, log_path=None) -> Checkpoint:
    """Joint finetune of both modules from a stage-2 checkpoint."""
    embedder = _build_embedder_from(both_ckpt, cfg)
    enhancer = _build_enhancer_from(both_ckpt, cfg)
    return _run_pair_stage(
        "finetune", manifest_dir, manifest, cfg, enhancer, embedder, system,
        cfg.lr_finetune, cfg.max_epochs_finetune, out_path, log_path,
        freeze_embedder=False)


def run_ablation(manifest_dir, manifest: Manifest, cfg: RunConfig, out_dir,
                 pretrain1_ckpt: Optional[Checkpoint] = None,
                 systems=("a", "b", "c", "d")) -> dict:
    """Run the requested systems off one shared embedder and score them.

    Returns {system: {condition: {eer, min_dcf}}}; checkpoints and logs land
    in out_dir.  System d reuses system c's stage-2 checkpoint when both are
    requested, mirroring their shared pretraining.
    """
    from .evaluation import build_trials, evaluate_system, system_from_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pretrain1_ckpt is None:
        p1_path = out_dir / "pretrain1.ckpt"
        pretrain1_ckpt = run_pretrain1(
            manifest_dir, manifest, cfg, p1_path, out_dir / "pretrain1.log")

    trials = build_trials(manifest, cfg.trials_per_speaker, cfg.seed)
    report: dict = {}
    stage2_cache: dict[str, Checkpoint] = {}

    def stage2_for(system_name: str) -> Checkpoint:
        key = "c" if system_name == "d" else system_name
        if key not in stage2_cache:
            stage2_cache[key] = run_pretrain2(
                manifest_dir, manifest, pretrain1_ckpt, cfg, AblationConfig(key),
                out_dir / f"system_{key}.ckpt", out_dir / f"system_{key}.log")
        return stage2_cache[key]

    for name in systems:
        system = AblationConfig(name)
        ckpt = stage2_for(name)
        if system.joint_finetune:
            ckpt = run_finetune(
                manifest_dir, manifest, ckpt, cfg, system,
                out_dir / f"system_{name}.ckpt", out_dir / f"system_{name}.log")
        pipeline = system_from_checkpoint(ckpt, cfg)
        report[name] = {
            condition: evaluate_system(pipeline, manifest_dir, manifest, trials,
                                       condition, cfg)
            for condition in ("clean", "noisy")
        }
    return report
