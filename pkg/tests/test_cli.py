"""Command-line workflow on a miniature end-to-end run."""

import numpy as np
import pytest

from conftest import TINY_OVERRIDES
from nvl.cli import main
from nvl.config import RunConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny corpus + stage-1 checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "desk.cfg"
    lines = [f"{key} = {value}" for key, value in TINY_OVERRIDES.items()]
    cfg_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    corpus = root / "corpus"
    assert main(["gen-corpus", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    ckpt = root / "p1.ckpt"
    assert main(["train", "--config", str(cfg_path), "--manifest", str(corpus),
                 "--stage", "pretrain1", "--out", str(ckpt)]) == 0
    return root, cfg_path, corpus, ckpt


class TestGenCorpus:
    def test_manifest_line_count_matches_config(self, workdir):
        root, cfg_path, corpus, _ = workdir
        cfg = RunConfig.from_file(cfg_path)
        lines = [l for l in (corpus / "manifest.tsv").read_text().splitlines()
                 if l and not l.startswith("#")]
        expected = (4 * cfg.train_speakers * cfg.train_utts_per_speaker
                    + 2 * cfg.test_speakers * cfg.test_utts_per_speaker)
        assert len(lines) == expected

    def test_refuses_rerun_without_force(self, workdir, capsys):
        root, cfg_path, corpus, _ = workdir
        code = main(["gen-corpus", "--config", str(cfg_path), "--out", str(corpus)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_invalid_config_names_field(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("snr_train_lo_db = 30\nsnr_train_hi_db = 10\n")
        code = main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path / "c")])
        assert code == 1
        assert "snr_train_lo_db" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("not_a_real_key = 3\n")
        code = main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path / "c")])
        assert code == 1
        assert "not_a_real_key" in capsys.readouterr().err


class TestTrain:
    def test_pretrain2_without_prerequisite_fails(self, workdir, tmp_path, capsys):
        root, cfg_path, corpus, _ = workdir
        code = main(["train", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--stage", "pretrain2", "--out", str(tmp_path / "x.ckpt")])
        assert code == 1
        assert "pretrain1" in capsys.readouterr().err

    def test_ablation_b_routes_to_original_perceptual_loss(self, workdir, tmp_path):
        root, cfg_path, corpus, ckpt = workdir
        out = tmp_path / "b.ckpt"
        assert main(["train", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--stage", "pretrain2", "--embedder-ckpt", str(ckpt),
                     "--ablation", "b", "--out", str(out)]) == 0
        log = out.with_suffix(".log").read_text().splitlines()
        step_lines = [l.split("\t") for l in log if l.startswith("step")]
        assert step_lines, "no step records written"
        for parts in step_lines:
            assert parts[6] != "-"   # perceptual component present
            assert parts[7] == "-"   # no cross entropy in system (b)

    def test_completed_run_prints_final_epoch_loss(self, workdir, tmp_path, capsys):
        root, cfg_path, corpus, ckpt = workdir
        out = tmp_path / "p2.ckpt"
        code = main(["train", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--stage", "pretrain2", "--embedder-ckpt", str(ckpt),
                     "--ablation", "c", "--out", str(out)])
        assert code == 0
        assert "final epoch record: epoch" in capsys.readouterr().out


class TestEvaluate:
    def test_report_contains_both_metrics(self, workdir, tmp_path, capsys):
        root, cfg_path, corpus, ckpt = workdir
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        report = (out / "report.txt").read_text()
        assert "eer_percent:" in report and "min_dcf:" in report
        assert "condition: clean" in report and "condition: noisy" in report
        assert (out / "scores_clean.tsv").exists()
        assert (out / "trials.tsv").exists()

    def test_baseline_flag_accepted_on_stage1_checkpoint(self, workdir, tmp_path):
        root, cfg_path, corpus, ckpt = workdir
        out = tmp_path / "eval_base"
        assert main(["evaluate", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--checkpoint", str(ckpt), "--baseline", "--condition", "clean",
                     "--out", str(out)]) == 0

    def test_identical_inputs_byte_identical_report(self, workdir, tmp_path):
        root, cfg_path, corpus, ckpt = workdir
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["evaluate", "--config", str(cfg_path), "--manifest", str(corpus),
                         "--checkpoint", str(ckpt), "--out", str(out)]) == 0
            outs.append((out / "report.txt").read_bytes())
        assert outs[0] == outs[1]


class TestExtract:
    def test_embedding_length_and_determinism(self, workdir, tmp_path):
        root, cfg_path, corpus, ckpt = workdir
        cfg = RunConfig.from_file(cfg_path)
        wav = next((corpus / "audio").glob("*_clean.wav"))
        paths = []
        for name in ("e1.txt", "e2.txt"):
            out = tmp_path / name
            assert main(["extract", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                         "--wav", str(wav), "--out", str(out)]) == 0
            paths.append(out)
        first = paths[0].read_text().splitlines()
        assert len(first) == cfg.embed_dim
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_unreadable_audio_fails(self, workdir, tmp_path, capsys):
        root, cfg_path, corpus, ckpt = workdir
        bad = tmp_path / "noise.wav"
        bad.write_bytes(b"not a wav file")
        code = main(["extract", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--wav", str(bad), "--out", str(tmp_path / "e.txt")])
        assert code != 0


class TestReport:
    def test_recomputes_metrics_from_files(self, workdir, tmp_path, capsys):
        root, cfg_path, corpus, ckpt = workdir
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--checkpoint", str(ckpt), "--condition", "noisy",
                     "--out", str(out)]) == 0
        capsys.readouterr()
        code = main(["report", "--config", str(cfg_path),
                     "--scores", str(out / "scores_noisy.tsv"),
                     "--trials", str(out / "trials.tsv"),
                     "--system", "baseline", "--condition", "noisy"])
        assert code == 0
        assert "EER" in capsys.readouterr().out


class TestCheckpointIntegrity:
    def test_truncated_checkpoint_is_a_runtime_error(self, workdir, tmp_path, capsys):
        root, cfg_path, corpus, ckpt = workdir
        broken = tmp_path / "broken.ckpt"
        broken.write_bytes(ckpt.read_bytes()[:-10])
        code = main(["evaluate", "--config", str(cfg_path), "--manifest", str(corpus),
                     "--checkpoint", str(broken), "--out", str(tmp_path / "ev")])
        assert code == 2
