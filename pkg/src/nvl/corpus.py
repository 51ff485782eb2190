"""Deterministic synthetic corpus: parametric speakers, noise, SNR mixing.

Speakers are pulse-train sources (random-walk pitch) shaped by a bank of
second-order resonators; noise comes in four flavours (white, pink, tonal,
babble).  Mixing happens in the stored 16-bit integer domain: the noise
scale is iterated until the SNR measured from the quantized arrays matches
the requested value to well under 1e-6 dB, so that corpus files themselves
carry the advertised SNR and clean + scaled-noise = noisy holds exactly.

Splits mirror a train/test verification layout:

  train_clean       base utterances of the training speakers
  train_noisy       train_clean + primary noise, SNR uniform in (0, 20)
                    excluding a +/-0.01 dB window around {0,5,10,15,20}
  train_clean_aug   train_clean + secondary noise (two families, A and B)
  train_noisy_aug   train_noisy + secondary noise; family A pairs back to
                    the plain clean, family B shares its noise instance
                    with the matching clean_aug and pairs to it
  test_clean        disjoint speakers
  test_noisy        test_clean + primary noise, SNR drawn from {0,5,10,15,20}

Regenerating with the same config yields byte-identical audio and manifest.
"""

from __future__ import annotations

import hashlib
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .config import RunConfig
from .dsp import SAMPLE_RATE, Waveform

INT_SCALE = 32768.0
# Primary corruption (and the test condition) draws from all four noise
# flavours, weighted toward the broadband/non-stationary ones that actually
# survive per-utterance normalization and hurt the embedder.  The two
# secondary augmentation families use the quasi-stationary kinds, so
# augmentation does not pre-solve the test condition.
NOISE_KINDS = ("white", "pink", "tonal", "babble")
PRIMARY_KIND_WEIGHTS = (0.4, 0.2, 0.15, 0.25)
AUG_FAMILY_A_KINDS = ("tonal",)
AUG_FAMILY_B_KINDS = ("pink",)
BABBLE_SPEAKER_BASE = 100_000

TRAIN_SPLITS = ("train_clean", "train_clean_aug", "train_noisy", "train_noisy_aug")
NOISY_SPLITS = ("train_clean_aug", "train_noisy", "train_noisy_aug", "test_noisy")
ALL_SPLITS = TRAIN_SPLITS + ("test_clean", "test_noisy")

# Amplitude budget in the int16 domain: clean sits near rms 0.08 of full
# scale and the worst-case stack (clean + primary + secondary noise) is
# scaled to peak below 0.94 so integer mixing can never clip.
CLEAN_RMS_TARGET = 0.08
CLEAN_PEAK_LIMIT = 0.35
STACK_PEAK_LIMIT = 0.94

SNR_FIT_ASSERT_DB = 2.5e-7


@dataclass
class SpeakerModel:
    """Parametric voice: pitch range plus a bank of resonances."""

    speaker_id: int
    f0_range: tuple[float, float]
    resonances: list[tuple[float, float, float]]  # (center Hz, bandwidth Hz, gain)
    seed: int

    def __post_init__(self):
        lo, hi = self.f0_range
        if not (80.0 <= lo < hi <= 400.0):
            raise ValueError(f"f0 range {self.f0_range} outside [80, 400] Hz")
        if len(self.resonances) < 2:
            raise ValueError("a speaker needs at least 2 resonances")


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: int
    split: str
    snr_db: Optional[float]
    paired_clean_id: Optional[str]
    path: str

    def __post_init__(self):
        if self.split not in ALL_SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if (self.snr_db is not None) != (self.split in NOISY_SPLITS):
            raise ValueError(f"{self.utt_id}: snr_db must be present exactly for noisy/aug splits")


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    speaker_count: int
    config_hash: str

    def by_split(self, split: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.split == split]

    def record(self, utt_id: str) -> UtteranceRecord:
        for r in self.records:
            if r.utt_id == utt_id:
                return r
        raise KeyError(f"no utterance {utt_id!r} in manifest")

    def speakers_of(self, splits) -> set[int]:
        wanted = set(splits)
        return {r.speaker_id for r in self.records if r.split in wanted}

    # -- serialization: tab-separated records, "#" metadata lines --------------

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# speaker_count\t{self.speaker_count}\n")
            f.write(f"# config_hash\t{self.config_hash}\n")
            for r in self.records:
                snr = repr(float(r.snr_db)) if r.snr_db is not None else "-"
                pair = r.paired_clean_id if r.paired_clean_id is not None else "-"
                f.write(f"{r.utt_id}\t{r.speaker_id}\t{r.split}\t{snr}\t{pair}\t{r.path}\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        records = []
        speaker_count = 0
        config_hash = ""
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].strip().split("\t")
                    if len(parts) == 2 and parts[0] == "speaker_count":
                        speaker_count = int(parts[1])
                    elif len(parts) == 2 and parts[0] == "config_hash":
                        config_hash = parts[1]
                    continue
                utt_id, spk, split, snr, pair, rel = line.split("\t")
                records.append(UtteranceRecord(
                    utt_id=utt_id,
                    speaker_id=int(spk),
                    split=split,
                    snr_db=None if snr == "-" else float(snr),
                    paired_clean_id=None if pair == "-" else pair,
                    path=rel,
                ))
        return cls(records, speaker_count, config_hash)

    def validate(self, cfg: RunConfig):
        problems = []
        ids = [r.utt_id for r in self.records]
        if len(ids) != len(set(ids)):
            problems.append("duplicate utterance ids")
        train_spk = self.speakers_of(TRAIN_SPLITS)
        test_spk = self.speakers_of(("test_clean", "test_noisy"))
        if train_spk & test_spk:
            problems.append(f"train/test speakers overlap: {sorted(train_spk & test_spk)}")
        all_spk = train_spk | test_spk
        if all_spk != set(range(len(all_spk))):
            problems.append("speaker ids are not dense 0..S-1")
        by_speaker: dict[int, int] = {}
        for r in self.by_split("train_clean"):
            by_speaker[r.speaker_id] = by_speaker.get(r.speaker_id, 0) + 1
        for spk, count in sorted(by_speaker.items()):
            if count < cfg.min_train_utts_per_speaker:
                problems.append(
                    f"speaker {spk} has {count} training utterances, "
                    f"fewer than the minimum {cfg.min_train_utts_per_speaker}")
        for r in self.records:
            if r.split in ("train_noisy", "train_noisy_aug") and r.paired_clean_id is None:
                problems.append(f"{r.utt_id}: noisy training utterance without a clean pairing")
        if problems:
            raise ValueError("manifest validation failed:\n  - " + "\n  - ".join(problems))


# -- deterministic seeding ---------------------------------------------------------


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


# -- speakers ------------------------------------------------------------------------

# Resonance centers are drawn from disjoint formant-like bands so every
# voice has a spread-out, strictly increasing envelope.
_RESONANCE_BANDS = [
    (250.0, 850.0), (900.0, 1800.0), (1900.0, 3000.0),
    (3100.0, 4500.0), (4600.0, 6500.0), (6600.0, 7600.0),
]


def make_speaker(speaker_id: int, corpus_seed: int, resonances: int = 5) -> SpeakerModel:
    rng = _rng(corpus_seed, 11, speaker_id)
    f0_lo = rng.uniform(85.0, 200.0)
    f0_hi = min(f0_lo * rng.uniform(1.15, 1.35), 395.0)
    bank = []
    for i in range(resonances):
        lo, hi = _RESONANCE_BANDS[i % len(_RESONANCE_BANDS)]
        center = rng.uniform(lo, hi)
        bandwidth = rng.uniform(60.0, 240.0)
        gain = rng.uniform(0.6, 1.6) * (2.0 if i == rng.integers(0, resonances) else 1.0)
        bank.append((center, bandwidth, gain))
    return SpeakerModel(speaker_id, (f0_lo, f0_hi), bank, seed=int(rng.integers(0, 2**31)))


def _bank_response(bank, z: np.ndarray) -> np.ndarray:
    total = np.zeros(len(z), dtype=np.complex128)
    for center, bandwidth, gain in bank:
        r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
        w = 2.0 * np.pi * center / SAMPLE_RATE
        total += gain * (1.0 - r) / (1.0 - 2.0 * r * np.cos(w) * z + (r * r) * z * z)
    return np.abs(total)


def speaker_response(spk: SpeakerModel, freqs: np.ndarray) -> np.ndarray:
    """Long-term |H(f)|: the phone-inventory average of the resonator response."""
    z = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / SAMPLE_RATE)
    phones = phone_inventory(spk)
    return np.mean([_bank_response(bank, z) for bank in phones], axis=0)


def _filter_bank(bank, excitation: np.ndarray) -> np.ndarray:
    out = np.zeros_like(excitation)
    for center, bandwidth, gain in bank:
        r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
        w = 2.0 * np.pi * center / SAMPLE_RATE
        out += lfilter([gain * (1.0 - r)], [1.0, -2.0 * r * np.cos(w), r * r], excitation)
    return out


PHONES_PER_SPEAKER = 6
PHONE_MIN_S = 0.08
PHONE_MAX_S = 0.25
PHONE_FADE = 160  # 10 ms raised-cosine crossfade at phone joins


def phone_inventory(spk: SpeakerModel) -> list:
    """Per-speaker phone templates: scattered variants of the base resonances.

    Utterances are non-stationary sequences over this inventory, so the
    speaker's identity survives per-utterance mean/variance normalization
    as the geometry of the scatter rather than the long-term average.
    """
    rng = _rng(spk.seed, 29)
    scatter = rng.uniform(0.12, 0.30)  # log-scale formant spread, a voice trait
    phones = []
    for _ in range(PHONES_PER_SPEAKER):
        bank = []
        for center, bandwidth, gain in spk.resonances:
            c = float(np.clip(center * np.exp(rng.normal(0.0, scatter)), 120.0, 7800.0))
            b = float(bandwidth * np.exp(rng.normal(0.0, 0.15)))
            g = float(gain * np.exp(rng.normal(0.0, 0.35)))
            bank.append((c, b, g))
        phones.append(bank)
    return phones


def synth_utterance(spk: SpeakerModel, duration_s: float, seed: int) -> Waveform:
    """Pulse-train voice over a phone sequence from the speaker's inventory."""
    if duration_s < 1.0:
        raise ValueError(f"utterance duration must be >= 1 s, got {duration_s}")
    rng = _rng(spk.seed, 23, seed)
    n = int(round(duration_s * SAMPLE_RATE))

    # Pitch track: bounded random walk updated every 10 ms.
    lo, hi = spk.f0_range
    blocks = n // 160 + 1
    f0 = np.empty(blocks)
    f0[0] = rng.uniform(lo, hi)
    steps = rng.normal(0.0, 3.0, blocks - 1)
    for i in range(1, blocks):
        v = f0[i - 1] + steps[i - 1]
        while v < lo or v > hi:  # reflect at the range edges
            v = 2.0 * lo - v if v < lo else 2.0 * hi - v
        f0[i] = v
    f0_per_sample = np.repeat(f0, 160)[:n]

    phase = np.cumsum(f0_per_sample) / SAMPLE_RATE
    excitation = np.zeros(n)
    excitation[np.diff(np.floor(phase), prepend=0.0) >= 1.0] = 1.0
    excitation += 0.05 * rng.standard_normal(n)  # aspiration floor

    # Phone segmentation; a too-short tail merges into the last phone.
    cuts = []
    pos = 0
    phones = phone_inventory(spk)
    while pos < n:
        length = int(rng.uniform(PHONE_MIN_S, PHONE_MAX_S) * SAMPLE_RATE)
        cuts.append([pos, pos + length, int(rng.integers(0, len(phones)))])
        pos += length
    cuts[-1][1] = n
    if len(cuts) > 1 and cuts[-1][1] - cuts[-1][0] < PHONE_MIN_S * SAMPLE_RATE:
        cuts[-2][1] = n
        cuts.pop()

    # Overlap-add: each phone filters a padded excitation slice; raised-cosine
    # half-windows at inner joins sum to one.
    voiced = np.zeros(n)
    for start, stop, index in cuts:
        lo_i = max(0, start - PHONE_FADE)
        hi_i = min(n, stop + PHONE_FADE)
        segment = _filter_bank(phones[index], excitation[lo_i:hi_i])
        window = np.ones(hi_i - lo_i)
        if start > 0:
            ramp = np.arange(start - lo_i + PHONE_FADE) + 1.0
            up = 0.5 - 0.5 * np.cos(np.pi * ramp / len(ramp))
            window[:len(ramp)] = up
        if stop < n:
            ramp = np.arange(hi_i - stop + PHONE_FADE) + 1.0
            down = 0.5 + 0.5 * np.cos(np.pi * ramp / len(ramp))
            window[-len(ramp):] = down
        voiced[lo_i:hi_i] += segment * window

    # Slow amplitude envelope from cosine-interpolated control points.
    points = rng.uniform(0.25, 1.0, n // 4000 + 2)
    grid = np.linspace(0.0, len(points) - 1.0, n)
    left = np.floor(grid).astype(int)
    frac = grid - left
    right = np.minimum(left + 1, len(points) - 1)
    smooth = 0.5 - 0.5 * np.cos(np.pi * frac)
    envelope = points[left] * (1.0 - smooth) + points[right] * smooth
    voiced *= envelope

    rms = np.sqrt(np.mean(voiced**2))
    voiced *= CLEAN_RMS_TARGET / rms
    peak = np.max(np.abs(voiced))
    if peak > CLEAN_PEAK_LIMIT:
        voiced *= CLEAN_PEAK_LIMIT / peak
    return Waveform(voiced)


# -- noise -----------------------------------------------------------------------------


def _unit_power(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x**2))


def synth_noise(kind: str, duration_s: float, seed: int) -> Waveform:
    """Unit-power noise of the requested flavour (mean square exactly 1)."""
    rng = _rng(37, seed)
    n = int(round(duration_s * SAMPLE_RATE))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
        shaping = 1.0 / np.sqrt(np.maximum(freqs, 10.0))
        shaping[0] = 0.0
        x = np.fft.irfft(spectrum * shaping, n)
    elif kind == "tonal":
        m = int(rng.integers(2, 6))
        freqs = rng.uniform(200.0, 3500.0, m)
        amps = rng.uniform(0.8, 1.2, m)
        phases = rng.uniform(0.0, 2.0 * np.pi, m)
        t = np.arange(n) / SAMPLE_RATE
        x = np.zeros(n)
        for f, a, p in zip(freqs, amps, phases):
            x += a * np.sin(2.0 * np.pi * f * t + p)
    elif kind == "babble":
        # Four voices from a reserved speaker-id range (never a corpus speaker).
        x = np.zeros(n)
        for j in range(4):
            spk = make_speaker(BABBLE_SPEAKER_BASE + int(rng.integers(0, 2**20)), seed * 4 + j)
            x += synth_utterance(spk, max(duration_s, 1.0), seed=j).samples[:n]
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return Waveform(_unit_power(x))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """clean + alpha * noise with alpha set so the realized SNR equals snr_db."""
    if len(noise) < len(clean):
        raise ValueError(f"noise ({len(noise)}) shorter than clean ({len(clean)})")
    c = clean.samples
    n = noise.samples[:len(c)]
    p_clean = np.mean(c**2)
    if p_clean == 0.0:
        raise ValueError("clean waveform has zero power; SNR is undefined")
    p_noise = np.mean(n**2)
    alpha = np.sqrt(p_clean / p_noise) * 10.0 ** (-snr_db / 20.0)
    return Waveform(c + alpha * n)


def measured_snr_db(base_int: np.ndarray, noisy_int: np.ndarray) -> float:
    """SNR recomputed from stored integer signals: base vs (noisy - base)."""
    base = base_int.astype(np.float64)
    diff = noisy_int.astype(np.float64) - base
    return float(10.0 * np.log10(np.sum(base**2) / np.sum(diff**2)))


def _fit_noise_to_snr(base_int: np.ndarray, noise_float: np.ndarray, snr_db: float) -> np.ndarray:
    """Quantize scaled noise so the integer-domain SNR hits snr_db.

    Plain rounding leaves the achieved SNR a few 1e-6 dB off, so after the
    initial scaling individual samples are nudged by one quantum.  A nudge
    changes the (integer) sum of squares by an odd amount, 2|v|+1 up or
    2|v|-1 down, and near-zero samples provide steps of exactly 1, so the
    sum can be driven to the real-valued target within 0.5, i.e. to a
    relative power error around 1e-10.
    """
    target_sum = float(np.sum(base_int.astype(np.float64) ** 2)) * 10.0 ** (-snr_db / 10.0)
    alpha = np.sqrt(target_sum / np.sum(noise_float**2))
    n = np.rint(alpha * noise_float).astype(np.int64)

    need = int(np.rint(target_sum - float(np.sum(n.astype(np.float64) ** 2))))
    if need != 0:
        order = np.argsort(np.abs(n), kind="stable")  # ascending |v|
        sign = 1 if need > 0 else -1
        need = abs(need)
        for i in order[::-1]:
            mag = abs(int(n[i]))
            if sign < 0 and mag == 0:
                continue
            step = 2 * mag + 1 if sign > 0 else 2 * mag - 1
            if step <= need:
                if sign > 0:
                    n[i] += 1 if n[i] >= 0 else -1
                else:
                    n[i] -= 1 if n[i] > 0 else -1
                need -= step
                if need == 0:
                    break

    err = abs(measured_snr_db(base_int, base_int + n) - snr_db)
    if err > SNR_FIT_ASSERT_DB:
        raise RuntimeError(f"SNR fit did not converge: residual {err:.3e} dB")
    return n


# -- WAV I/O ------------------------------------------------------------------------


def write_wav(path, samples_int: np.ndarray):
    if np.max(np.abs(samples_int)) > 32767:
        raise ValueError("samples exceed int16 range")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(samples_int.astype("<i2").tobytes())


def read_wav_int(path) -> np.ndarray:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2 or f.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected 16 kHz mono 16-bit PCM")
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return data.astype(np.int64)


def read_wav(path) -> Waveform:
    return Waveform(read_wav_int(path).astype(np.float64) / INT_SCALE)


# -- corpus assembly --------------------------------------------------------------------


def _draw_train_snr(rng: np.random.Generator, cfg: RunConfig,
                    lo: Optional[float] = None, hi: Optional[float] = None) -> float:
    grid = cfg.snr_test_values()
    lo = cfg.snr_train_lo_db if lo is None else lo
    hi = cfg.snr_train_hi_db if hi is None else hi
    while True:
        v = float(rng.uniform(lo, hi))
        if min(abs(v - g) for g in grid) > cfg.snr_reject_window_db:
            return v


def mixing_base_id(record: UtteranceRecord) -> Optional[str]:
    """Utterance whose waveform the record's noise was measured against."""
    stem = record.utt_id.rsplit("_", 1)[0]
    if record.split in ("train_noisy", "test_noisy", "train_clean_aug"):
        return f"{stem}_clean"
    if record.split == "train_noisy_aug":
        return f"{stem}_noisy"
    return None


def build_corpus(cfg: RunConfig, out_dir, force: bool = False) -> Manifest:
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    manifest_path = out_dir / "manifest.tsv"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force=True to regenerate")
    audio_dir.mkdir(parents=True, exist_ok=True)

    records: list[UtteranceRecord] = []

    def emit(utt_id, speaker_id, split, snr_db, paired, samples_int):
        rel = f"audio/{utt_id}.wav"
        write_wav(out_dir / rel, samples_int)
        records.append(UtteranceRecord(utt_id, speaker_id, split, snr_db, paired, rel))

    n_train = cfg.train_speakers
    for sid in range(n_train + cfg.test_speakers):
        is_train = sid < n_train
        spk = make_speaker(sid, cfg.seed, cfg.resonances_per_speaker)
        n_utts = cfg.train_utts_per_speaker if is_train else cfg.test_utts_per_speaker
        for j in range(n_utts):
            rng = _rng(cfg.seed, 101, sid, j)
            stem = f"spk{sid:03d}_utt{j:03d}"
            duration = float(rng.uniform(cfg.duration_lo_s, cfg.duration_hi_s))
            clean = synth_utterance(spk, duration, seed=int(rng.integers(0, 2**31)))

            kind = NOISE_KINDS[int(rng.choice(len(NOISE_KINDS), p=PRIMARY_KIND_WEIGHTS))]
            primary = synth_noise(kind, duration, seed=int(rng.integers(0, 2**31)))
            if is_train:
                snr1 = _draw_train_snr(rng, cfg)
            else:
                grid = cfg.snr_test_values()
                snr1 = grid[int(rng.integers(0, len(grid)))]

            family = "A" if j % 2 == 0 else "B"
            if is_train:
                fam_kinds = AUG_FAMILY_A_KINDS if family == "A" else AUG_FAMILY_B_KINDS
                kind2 = fam_kinds[int(rng.integers(0, len(fam_kinds)))]
                secondary = synth_noise(kind2, duration, seed=int(rng.integers(0, 2**31)))
                snr2 = _draw_train_snr(rng, cfg, cfg.snr_aug_lo_db, cfg.snr_aug_hi_db)
                if family == "A":
                    kind3 = fam_kinds[int(rng.integers(0, len(fam_kinds)))]
                    tertiary = synth_noise(kind3, duration, seed=int(rng.integers(0, 2**31)))
                    snr3 = _draw_train_snr(rng, cfg, cfg.snr_aug_lo_db, cfg.snr_aug_hi_db)
                else:
                    tertiary, snr3 = None, None
            else:
                secondary = tertiary = None

            # Single linear scale for the whole group so the loudest stack
            # (clean + primary + secondary noise) stays inside the int16 range.
            c = clean.samples
            rms_c = np.sqrt(np.mean(c**2))
            a1 = rms_c * 10.0 ** (-snr1 / 20.0)
            peak1 = a1 * np.max(np.abs(primary.samples))
            stack_peak = np.max(np.abs(c)) + peak1
            if secondary is not None:
                a2 = rms_c * 10.0 ** (-snr2 / 20.0)
                peak2 = a2 * np.max(np.abs(secondary.samples))
                if tertiary is not None:
                    rms_noisy = np.sqrt(rms_c**2 + a1**2)
                    a3 = rms_noisy * 10.0 ** (-snr3 / 20.0)
                    peak2 = max(peak2, a3 * np.max(np.abs(tertiary.samples)))
                stack_peak += peak2
            scale = min(1.0, STACK_PEAK_LIMIT / stack_peak) * INT_SCALE

            clean_int = np.rint(c * scale).astype(np.int64)
            n1_int = _fit_noise_to_snr(clean_int, primary.samples, snr1)
            noisy_int = clean_int + n1_int

            split_prefix = "train" if is_train else "test"
            emit(f"{stem}_clean", sid, f"{split_prefix}_clean", None, None, clean_int)
            emit(f"{stem}_noisy", sid, f"{split_prefix}_noisy", snr1, f"{stem}_clean", noisy_int)

            if is_train:
                if family == "A":
                    n2_int = _fit_noise_to_snr(clean_int, secondary.samples, snr2)
                    emit(f"{stem}_cleanaug", sid, "train_clean_aug", snr2,
                         f"{stem}_clean", clean_int + n2_int)
                    n3_int = _fit_noise_to_snr(noisy_int, tertiary.samples, snr3)
                    emit(f"{stem}_noisyaug", sid, "train_noisy_aug", snr3,
                         f"{stem}_clean", noisy_int + n3_int)
                else:
                    # Family B: one shared noise instance on both pair members,
                    # so the aug component is not something to enhance away.
                    n2_int = _fit_noise_to_snr(clean_int, secondary.samples, snr2)
                    emit(f"{stem}_cleanaug", sid, "train_clean_aug", snr2,
                         f"{stem}_clean", clean_int + n2_int)
                    derived = measured_snr_db(noisy_int, noisy_int + n2_int)
                    emit(f"{stem}_noisyaug", sid, "train_noisy_aug", derived,
                         f"{stem}_cleanaug", noisy_int + n2_int)

    manifest = Manifest(records, n_train + cfg.test_speakers, cfg.content_hash())
    manifest.validate(cfg)
    manifest.write(manifest_path)
    cfg.to_file(out_dir / "corpus_config.txt")
    return manifest


def load_utterance(manifest_dir, record: UtteranceRecord) -> Waveform:
    return read_wav(Path(manifest_dir) / record.path)
