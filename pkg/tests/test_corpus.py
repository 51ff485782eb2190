"""Synthetic corpus: speakers, noise flavours, SNR mixing, manifests."""

import numpy as np
import pytest
from scipy.signal import find_peaks, welch

from nvl import corpus as C
from nvl.config import ConfigError, RunConfig
from nvl.corpus import (Manifest, SpeakerModel, UtteranceRecord, build_corpus,
                        make_speaker, measured_snr_db, mix_at_snr, mixing_base_id,
                        read_wav_int, speaker_response, synth_noise, synth_utterance)
from nvl.dsp import SAMPLE_RATE, Waveform, logmel, mel_filterbank


class TestSpeakers:
    def test_same_inputs_bitwise_identical(self):
        spk = make_speaker(3, corpus_seed=11)
        a = synth_utterance(spk, 1.5, seed=7)
        b = synth_utterance(spk, 1.5, seed=7)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_two_speakers_differ(self):
        a = synth_utterance(make_speaker(0, 11), 1.5, seed=7)
        b = synth_utterance(make_speaker(1, 11), 1.5, seed=7)
        assert np.linalg.norm(a.samples - b.samples) > 0.0

    def test_f0_range_invariant(self):
        for sid in range(20):
            spk = make_speaker(sid, corpus_seed=5)
            lo, hi = spk.f0_range
            assert 80.0 <= lo < hi <= 400.0
            assert len(spk.resonances) >= 2

    def test_invalid_f0_range_rejected(self):
        with pytest.raises(ValueError):
            SpeakerModel(0, (50.0, 90.0), [(500.0, 100.0, 1.0)] * 3, seed=1)

    def test_long_term_spectrum_peaks_near_strongest_resonance(self):
        """Measured spectral peak sits within one Mel bin of the analytic one.

        Oracle: project the analytic resonator response through the Mel
        filterbank and take the argmax; compare against the argmax of the
        average measured Mel magnitudes.
        """
        bank = mel_filterbank()
        fft_freqs = np.arange(257) * (SAMPLE_RATE / 512)
        for sid in range(6):
            spk = make_speaker(sid, corpus_seed=3)
            predicted = int(np.argmax(bank @ speaker_response(spk, fft_freqs)))
            wav = synth_utterance(spk, 4.0, seed=0)
            measured = int(np.argmax(np.exp(logmel(wav).frames).mean(axis=0)))
            assert abs(measured - predicted) <= 1


class TestNoise:
    @pytest.mark.parametrize("kind", ["white", "pink", "tonal", "babble"])
    def test_unit_power(self, kind):
        w = synth_noise(kind, 2.0, seed=4)
        assert abs(np.mean(w.samples**2) - 1.0) < 1e-6

    def test_white_mean_within_three_sigma(self):
        w = synth_noise("white", 2.0, seed=9)
        assert abs(np.mean(w.samples)) < 3.0 / np.sqrt(len(w.samples))

    def test_pink_slope_near_minus_3db_per_octave(self):
        w = synth_noise("pink", 8.0, seed=2)
        freqs, psd = welch(w.samples, fs=SAMPLE_RATE, nperseg=8192)
        band = (freqs >= 100.0) & (freqs <= 4000.0)
        octaves = np.log2(freqs[band])
        level_db = 10.0 * np.log10(psd[band])
        slope = np.polyfit(octaves, level_db, 1)[0]
        assert abs(slope - (-3.01)) < 1.0

    def test_tonal_has_at_most_five_strong_peaks(self):
        w = synth_noise("tonal", 4.0, seed=6)
        spectrum = np.abs(np.fft.rfft(w.samples * np.hanning(len(w.samples))))
        level = 20.0 * np.log10(spectrum + 1e-12)
        peaks, _ = find_peaks(level, height=level.max() - 20.0, prominence=6.0)
        assert 1 <= len(peaks) <= 5

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            synth_noise("brown", 1.0, seed=0)


class TestMixing:
    def test_equal_power_zero_db_alpha_one(self):
        rng = np.random.default_rng(0)
        clean = Waveform(rng.standard_normal(8000) * 0.1)
        noise = Waveform(clean.samples[::-1].copy())
        out = mix_at_snr(clean, noise, 0.0)
        np.testing.assert_allclose(out.samples, clean.samples + noise.samples, atol=1e-12)

    def test_twenty_db_scales_by_tenth(self):
        rng = np.random.default_rng(1)
        clean = Waveform(C._unit_power(rng.standard_normal(8000)) * 0.1)
        noise = Waveform(C._unit_power(rng.standard_normal(8000)) * 0.1)
        out = mix_at_snr(clean, noise, 20.0)
        np.testing.assert_allclose(out.samples - clean.samples, 0.1 * noise.samples,
                                   atol=1e-12)

    def test_realized_snr_matches_request(self):
        rng = np.random.default_rng(2)
        for snr in (0.0, 3.7, 12.2, 19.9):
            clean = Waveform(rng.standard_normal(12000) * 0.05)
            noise = Waveform(rng.standard_normal(16000))
            out = mix_at_snr(clean, noise, snr)
            diff = out.samples - clean.samples
            realized = 10.0 * np.log10(np.mean(clean.samples**2) / np.mean(diff**2))
            assert abs(realized - snr) < 1e-9

    def test_silent_clean_rejected(self):
        with pytest.raises(ValueError):
            mix_at_snr(Waveform(np.zeros(8000)), Waveform(np.ones(8000)), 10.0)

    def test_short_noise_rejected(self):
        with pytest.raises(ValueError):
            mix_at_snr(Waveform(np.ones(8000) * 0.1), Waveform(np.ones(4000)), 10.0)


class TestBuildCorpus:
    def test_counts_follow_config(self, tiny_cfg, tiny_corpus):
        _, manifest = tiny_corpus
        per_split = {}
        for r in manifest.records:
            per_split[r.split] = per_split.get(r.split, 0) + 1
        n_train = tiny_cfg.train_speakers * tiny_cfg.train_utts_per_speaker
        n_test = tiny_cfg.test_speakers * tiny_cfg.test_utts_per_speaker
        assert per_split["train_clean"] == n_train
        assert per_split["train_noisy"] == n_train
        assert per_split["train_clean_aug"] == n_train
        assert per_split["train_noisy_aug"] == n_train
        assert per_split["test_clean"] == n_test
        assert per_split["test_noisy"] == n_test

    def test_train_snrs_avoid_grid_and_test_snrs_on_grid(self, tiny_cfg, tiny_corpus):
        _, manifest = tiny_corpus
        grid = set(tiny_cfg.snr_test_values())
        for r in manifest.records:
            if r.split in ("train_noisy", "train_clean_aug", "train_noisy_aug"):
                assert r.snr_db not in grid
            elif r.split == "test_noisy":
                assert r.snr_db in grid

    def test_train_and_test_speakers_disjoint(self, tiny_corpus):
        _, manifest = tiny_corpus
        train = manifest.speakers_of(C.TRAIN_SPLITS)
        test = manifest.speakers_of(("test_clean", "test_noisy"))
        assert train.isdisjoint(test)
        assert train | test == set(range(manifest.speaker_count))

    def test_measured_snr_matches_manifest(self, tiny_corpus):
        root, manifest = tiny_corpus
        checked = 0
        for r in manifest.records:
            if r.snr_db is None:
                continue
            base = read_wav_int(root / manifest.record(mixing_base_id(r)).path)
            noisy = read_wav_int(root / r.path)
            assert abs(measured_snr_db(base, noisy) - r.snr_db) < 1e-6
            checked += 1
        assert checked > 0

    def test_noisy_minus_scaled_noise_is_clean_exactly(self, tiny_corpus):
        root, manifest = tiny_corpus
        for r in manifest.by_split("train_noisy"):
            clean = read_wav_int(root / manifest.record(r.paired_clean_id).path)
            noisy = read_wav_int(root / r.path)
            noise = noisy - clean
            np.testing.assert_array_equal(noisy - noise, clean)
            assert np.any(noise != 0)

    def test_pairing_targets_follow_family_rows(self, tiny_corpus):
        _, manifest = tiny_corpus
        for r in manifest.by_split("train_noisy_aug"):
            assert r.paired_clean_id is not None
            target = manifest.record(r.paired_clean_id)
            assert target.split in ("train_clean", "train_clean_aug")
            assert target.speaker_id == r.speaker_id

    def test_regeneration_is_byte_identical(self, tiny_cfg, tmp_path):
        first = tmp_path / "a"
        second = tmp_path / "b"
        build_corpus(tiny_cfg, first, force=True)
        build_corpus(tiny_cfg, second, force=True)
        files_a = sorted(p.relative_to(first) for p in first.rglob("*.wav"))
        files_b = sorted(p.relative_to(second) for p in second.rglob("*.wav"))
        assert files_a == files_b
        for rel in files_a:
            assert (first / rel).read_bytes() == (second / rel).read_bytes()
        assert ((first / "manifest.tsv").read_bytes()
                == (second / "manifest.tsv").read_bytes())

    def test_refuses_overwrite_without_force(self, tiny_cfg, tiny_corpus):
        root, _ = tiny_corpus
        with pytest.raises(FileExistsError):
            build_corpus(tiny_cfg, root, force=False)

    def test_inconsistent_config_lists_violations(self):
        with pytest.raises(ConfigError) as err:
            RunConfig(train_speakers=1, snr_train_lo_db=30.0, snr_train_hi_db=10.0)
        message = str(err.value)
        assert "train_speakers" in message
        assert "snr_train_lo_db" in message


class TestManifestIO:
    def test_round_trip(self, tiny_corpus):
        root, manifest = tiny_corpus
        loaded = Manifest.read(root / "manifest.tsv")
        assert loaded.speaker_count == manifest.speaker_count
        assert loaded.config_hash == manifest.config_hash
        assert len(loaded.records) == len(manifest.records)
        for a, b in zip(loaded.records, manifest.records):
            assert (a.utt_id, a.speaker_id, a.split, a.snr_db, a.paired_clean_id,
                    a.path) == (b.utt_id, b.speaker_id, b.split, b.snr_db,
                                b.paired_clean_id, b.path)

    def test_record_invariants(self):
        with pytest.raises(ValueError):
            UtteranceRecord("u0", 0, "train_clean", 5.0, None, "x.wav")
        with pytest.raises(ValueError):
            UtteranceRecord("u0", 0, "train_noisy", None, "c0", "x.wav")
        with pytest.raises(ValueError):
            UtteranceRecord("u0", 0, "nonsense", None, None, "x.wav")
