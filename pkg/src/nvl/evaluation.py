"""Speaker-verification scoring: trials, energy VAD, EER and minDCF.

Scores are cosine similarities between embeddings.  Metrics sweep every
operating point induced by the sorted scores (accept when score >= t,
thresholds at midpoints between distinct scores plus both extremes);
EER interpolates linearly between the two points bracketing the
miss = false-alarm crossing, and minDCF is the normalized minimum of
p * P_miss + (1 - p) * P_fa.  Both are exact functions of the count
sequences, so an O(n^2) recount sweep must reproduce them bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .corpus import Manifest, load_utterance
from .dsp import (HOP_LENGTH, WIN_LENGTH, ChannelStats, Spectrogram, Waveform,
                  channel_inverse, channel_normalize, instance_normalize, logmel)
from .models import Checkpoint, Embedder, Enhancer, load_params_into


@dataclass
class Trial:
    enroll_utt: str
    test_utt: str
    label: str  # target | nontarget

    def __post_init__(self):
        if self.label not in ("target", "nontarget"):
            raise ValueError(f"trial label must be target/nontarget, got {self.label!r}")
        if self.enroll_utt == self.test_utt:
            raise ValueError(f"trial pairs {self.enroll_utt!r} with itself")


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.trials) != len(self.scores):
            raise ValueError("one score per trial required")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        labels = {t.label for t in self.trials}
        if labels != {"target", "nontarget"}:
            raise ValueError("a score set needs at least one target and one nontarget trial")

    def target_scores(self) -> np.ndarray:
        return self.scores[[t.label == "target" for t in self.trials]]

    def nontarget_scores(self) -> np.ndarray:
        return self.scores[[t.label == "nontarget" for t in self.trials]]


# -- energy VAD -----------------------------------------------------------------------


def energy_vad(w: Waveform) -> Waveform:
    """Drop frames that are quiet both absolutely (40 dB under the loudest
    frame) and relatively (under the utterance-mean log energy)."""
    n = len(w.samples)
    if n < WIN_LENGTH:
        raise ValueError(f"waveform too short for VAD framing ({n} samples)")
    count = 1 + (n - WIN_LENGTH) // HOP_LENGTH
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(count)[:, None]
    energy = np.mean(w.samples[idx] ** 2, axis=1)
    energy_db = 10.0 * np.log10(energy + 1e-12)
    keep = (energy_db >= energy_db.max() - 40.0) | (energy_db >= energy_db.mean())
    if not np.any(keep):
        raise ValueError("no speech detected")
    pieces = []
    for i in np.flatnonzero(keep):
        stop = n if i == count - 1 else (i + 1) * HOP_LENGTH
        pieces.append(w.samples[i * HOP_LENGTH:stop])
    return Waveform(np.concatenate(pieces))


# -- trials ----------------------------------------------------------------------------


def build_trials(manifest: Manifest, trials_per_speaker: int, seed: int) -> list[Trial]:
    """Balanced single-speaker-enrollment trials over the clean test split."""
    by_speaker: dict[int, list[str]] = {}
    for rec in manifest.by_split("test_clean"):
        by_speaker.setdefault(rec.speaker_id, []).append(rec.utt_id)
    speakers = sorted(by_speaker)
    if len(speakers) < 2:
        raise ValueError("trial construction needs at least 2 test speakers")
    for spk in speakers:
        by_speaker[spk].sort()
        if len(by_speaker[spk]) < 2:
            raise ValueError(f"test speaker {spk} has fewer than 2 utterances")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 401]))
    trials: list[Trial] = []
    seen: set[tuple] = set()
    n_target = trials_per_speaker // 2
    for spk in speakers:
        utts = by_speaker[spk]
        made = 0
        attempts = 0
        while made < n_target and attempts < 100 * trials_per_speaker:
            attempts += 1
            a, b = rng.choice(len(utts), size=2, replace=False)
            key = (utts[a], utts[b])
            if key in seen:
                continue
            seen.add(key)
            trials.append(Trial(utts[a], utts[b], "target"))
            made += 1
        if made < n_target:
            raise ValueError(f"speaker {spk}: not enough utterances for {n_target} target trials")
        made = 0
        attempts = 0
        others = [s for s in speakers if s != spk]
        while made < trials_per_speaker - n_target and attempts < 100 * trials_per_speaker:
            attempts += 1
            enroll = utts[int(rng.integers(0, len(utts)))]
            other = others[int(rng.integers(0, len(others)))]
            test = by_speaker[other][int(rng.integers(0, len(by_speaker[other])))]
            key = (enroll, test)
            if key in seen:
                continue
            seen.add(key)
            trials.append(Trial(enroll, test, "nontarget"))
            made += 1
        if made < trials_per_speaker - n_target:
            raise ValueError(f"speaker {spk}: could not draw enough nontarget trials")
    return trials


def save_trials(path, trials: list[Trial]):
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(f"{t.enroll_utt}\t{t.test_utt}\t{t.label}\n")


def load_trials(path) -> list[Trial]:
    trials = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                enroll, test, label = line.split("\t")
                trials.append(Trial(enroll, test, label))
    return trials


def save_scores(path, scores: ScoreSet):
    with open(path, "w", encoding="utf-8") as f:
        for t, s in zip(scores.trials, scores.scores):
            f.write(f"{t.enroll_utt}\t{t.test_utt}\t{repr(float(s))}\n")


# -- scoring pipeline --------------------------------------------------------------------


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot cosine-score a zero embedding")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class VerificationSystem:
    """Embedder plus (optionally) the enhancement front half of the chain."""

    embedder: Embedder
    enhancer: Optional[Enhancer] = None
    stats_noisy: Optional[ChannelStats] = None
    stats_clean: Optional[ChannelStats] = None
    exponent: int = 1

    def embed_waveform(self, w: Waveform, vad: bool = True) -> np.ndarray:
        if vad:
            w = energy_vad(w)
        spec = logmel(w)
        if self.enhancer is not None:
            x = channel_normalize(spec, self.stats_noisy, self.exponent)
            _, enhanced = self.enhancer.enhance(x)
            spec = channel_inverse(enhanced, self.stats_clean, self.exponent)
        return self.embedder.embed(instance_normalize(spec, self.exponent))[0]


def system_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig,
                           baseline: bool = False) -> VerificationSystem:
    """Rebuild the scoring pipeline; ``baseline`` bypasses the enhancer."""
    n_speakers = int(ckpt.arrays["meta/n_speakers"][0])
    embedder = Embedder(
        channels=cfg.tdnn_channels, contexts=cfg.contexts(), embed_dim=cfg.embed_dim,
        fc2_dim=cfg.fc2_dim, n_speakers=n_speakers, seed=cfg.seed)
    load_params_into(embedder, ckpt.arrays, "embedder/")
    has_enhancer = any(name.startswith("enhancer/") for name in ckpt.arrays)
    if baseline or not has_enhancer:
        return VerificationSystem(embedder, exponent=cfg.sigma_exponent)
    enhancer = Enhancer(hidden=cfg.enhancer_hidden, layers=cfg.enhancer_layers, seed=cfg.seed)
    load_params_into(enhancer, ckpt.arrays, "enhancer/")
    return VerificationSystem(
        embedder, enhancer,
        ChannelStats(ckpt.arrays["stats/mu_noisy"], ckpt.arrays["stats/sigma_noisy"]),
        ChannelStats(ckpt.arrays["stats/mu_clean"], ckpt.arrays["stats/sigma_clean"]),
        cfg.sigma_exponent)


def score_trials(system: VerificationSystem, manifest_dir, manifest: Manifest,
                 trials: list[Trial], condition: str, cfg: RunConfig) -> ScoreSet:
    """Score trials under a test condition; trial ids name clean utterances."""
    if condition not in ("clean", "noisy"):
        raise ValueError(f"condition must be clean or noisy, got {condition!r}")
    utt_map = {}
    if condition == "clean":
        for rec in manifest.by_split("test_clean"):
            utt_map[rec.utt_id] = rec
    else:
        for rec in manifest.by_split("test_noisy"):
            if rec.paired_clean_id is None:
                raise ValueError(f"{rec.utt_id}: test_noisy record lacks clean pairing")
            utt_map[rec.paired_clean_id] = rec

    needed = sorted({t.enroll_utt for t in trials} | {t.test_utt for t in trials})
    missing = [u for u in needed if u not in utt_map]
    if missing:
        raise ValueError(f"no {condition} test audio for: {', '.join(missing[:5])}")
    embeddings = {}
    for utt in needed:
        w = load_utterance(manifest_dir, utt_map[utt])
        embeddings[utt] = system.embed_waveform(w, vad=cfg.vad_enabled)
    scores = np.array([
        cosine_score(embeddings[t.enroll_utt], embeddings[t.test_utt]) for t in trials])
    return ScoreSet(trials, scores)


# -- metrics ---------------------------------------------------------------------------------


def _operating_points(target: np.ndarray, nontarget: np.ndarray):
    """P_miss and P_fa over the full threshold sweep (accept iff score >= t).

    Points are ordered by increasing threshold: index 0 accepts everything,
    the last index rejects everything.
    """
    n_tar, n_non = len(target), len(nontarget)
    scores = np.concatenate([target, nontarget])
    labels = np.concatenate([np.ones(n_tar, dtype=bool), np.zeros(n_non, dtype=bool)])
    order = np.argsort(scores, kind="stable")
    scores, labels = scores[order], labels[order]

    # Collapse runs of equal scores so each distinct value is one step.
    distinct_last = np.flatnonzero(np.diff(scores) != 0)
    boundaries = np.concatenate([distinct_last, [len(scores) - 1]])
    tar_cum = np.cumsum(labels)
    non_cum = np.cumsum(~labels)
    miss_counts = np.concatenate([[0], tar_cum[boundaries]])
    fa_counts = np.concatenate([[n_non], n_non - non_cum[boundaries]])
    return miss_counts / n_tar, fa_counts / n_non


def eer(s: ScoreSet) -> float:
    """Equal error rate with linear interpolation at the miss/fa crossing."""
    p_miss, p_fa = _operating_points(s.target_scores(), s.nontarget_scores())
    return _eer_from_points(p_miss, p_fa)


def _eer_from_points(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    diff = p_miss - p_fa
    j = int(np.flatnonzero(diff >= 0.0)[0])
    if j == 0:
        return float(p_miss[0])
    gamma = (0.0 - diff[j - 1]) / (diff[j] - diff[j - 1])
    return float(p_miss[j - 1] + gamma * (p_miss[j] - p_miss[j - 1]))


def min_dcf(s: ScoreSet, p_target: float) -> float:
    """Minimum normalized detection cost with unit miss/false-alarm costs."""
    if not 0.0 < p_target < 1.0:
        raise ValueError(f"target prior must lie in (0, 1), got {p_target}")
    p_miss, p_fa = _operating_points(s.target_scores(), s.nontarget_scores())
    costs = (p_target * p_miss + (1.0 - p_target) * p_fa) / min(p_target, 1.0 - p_target)
    return float(np.min(costs))


# -- report ---------------------------------------------------------------------------------


def evaluate_system(system: VerificationSystem, manifest_dir, manifest: Manifest,
                    trials: list[Trial], condition: str, cfg: RunConfig) -> dict:
    scores = score_trials(system, manifest_dir, manifest, trials, condition, cfg)
    return {"eer": eer(scores), "min_dcf": min_dcf(scores, cfg.dcf_p_target),
            "trials": len(trials)}


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_report(path, entries: list[dict]):
    """Structured text report; one block per (system, condition) entry."""
    lines = ["# verification report"]
    for e in entries:
        lines.append("")
        lines.append(f"system: {e['system']}")
        lines.append(f"condition: {e['condition']}")
        lines.append(f"backend: {e.get('backend', 'cosine')}")
        lines.append(f"eer_percent: {repr(100.0 * e['eer'])}")
        lines.append(f"min_dcf: {repr(e['min_dcf'])}")
        lines.append(f"trials: {e['trials']}")
        lines.append(f"config_hash: {e.get('config_hash', '-')}")
        lines.append(f"checkpoint_sha256: {e.get('checkpoint_sha256', '-')}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
