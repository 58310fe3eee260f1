import csv
import hashlib
import json

import numpy as np
import pytest

from spkdeid.aan import load_model
from spkdeid.cli import main
from spkdeid.dataset import read_corpus
from spkdeid.metrics import read_report_csv


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


TINY_CONFIG = {
    "seed": 99,
    "dataset_tag": "tiny",
    "corpus": {"n_speakers": 6, "n_genders": 2, "n_accents": 2,
               "utterances_per_speaker": 7, "dim": 8,
               "attribute_strength": {"speaker": 0.6, "gender": 2.0, "accent": 2.0},
               "noise_sigma": 0.2},
    "split": {"n_heldout_per_speaker": 2},
    "model": {"hidden": 16, "latent": 4, "branch_hidden": 8},
    "train": {"lambda": 8.0, "epochs": 3, "batch_size": 8, "lr": 0.005},
    "anonymize": {"method": "aan1", "top_k": 3},
    "trials": {"n_nontarget_per_target": 2},
}


@pytest.fixture()
def tiny_run(tmp_path):
    config_path = tmp_path / "config.json"
    config = dict(TINY_CONFIG, out_dir=str(tmp_path / "run"))
    config_path.write_text(json.dumps(config))
    return config_path, tmp_path / "run"


def run_cli(*args):
    return main([str(a) for a in args])


class TestGenData:
    def test_writes_splits_and_manifest(self, tiny_run):
        config_path, out = tiny_run
        assert run_cli("gen-data", "--config", config_path) == 0
        for name in ("train.csv", "valid.csv", "test.csv", "manifest_gen-data.json"):
            assert (out / name).exists()
        train_c = read_corpus(out / "train.csv")
        assert len(train_c) == 6 * 3  # 7 utterances minus 2x2 held out

    def test_deterministic_outputs(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        first = {p.name: digest(p) for p in out.glob("*.csv")}
        run_cli("gen-data", "--config", config_path)
        second = {p.name: digest(p) for p in out.glob("*.csv")}
        assert first == second

    def test_invalid_spec_fails_naming_field(self, tmp_path, capsys):
        config = dict(TINY_CONFIG, out_dir=str(tmp_path / "r"))
        config["corpus"] = dict(config["corpus"], n_speakers=0)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        assert run_cli("gen-data", "--config", path) == 2
        assert "n_speakers" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"sed": 1}))
        assert run_cli("gen-data", "--config", path) == 2
        assert "sed" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_history_manifest(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        assert run_cli("train", "--config", config_path) == 0
        assert (out / "model.aan").exists()
        with (out / "history.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch",
                           "train_recon_loss", "train_gender_loss",
                           "train_accent_loss", "train_speaker_loss",
                           "valid_recon_loss", "valid_gender_loss",
                           "valid_accent_loss", "valid_speaker_loss",
                           "valid_gender_acc", "valid_accent_acc",
                           "valid_speaker_acc"]
        assert len(rows) == 1 + TINY_CONFIG["train"]["epochs"]

    def test_lambda_flag_overrides_config(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        run_cli("train", "--config", config_path, "--lambda", "2.5")
        assert load_model(out / "model.aan").lam == 2.5

    def test_rerun_identical_checkpoint(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        run_cli("train", "--config", config_path)
        first = digest(out / "model.aan")
        run_cli("train", "--config", config_path)
        assert digest(out / "model.aan") == first


class TestAnonymize:
    def test_identity_preserves_digest(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        assert run_cli("anonymize", "--config", config_path,
                       "--method", "identity",
                       "--in", out / "test.csv", "--out", out / "anon.csv") == 0
        assert digest(out / "anon.csv") == digest(out / "test.csv")

    def test_aan1_preserves_row_count(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        run_cli("train", "--config", config_path)
        run_cli("anonymize", "--config", config_path, "--method", "aan1",
                "--model", out / "model.aan",
                "--in", out / "test.csv", "--out", out / "anon.csv")
        assert len(read_corpus(out / "anon.csv")) == len(read_corpus(out / "test.csv"))

    def test_aan2_requires_model_and_pool_flags(self, tiny_run, capsys):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        run_cli("train", "--config", config_path)
        code = run_cli("anonymize", "--config", config_path, "--method", "aan2",
                       "--model", out / "model.aan",
                       "--in", out / "test.csv", "--out", out / "anon.csv")
        assert code == 2
        assert "--pool" in capsys.readouterr().err


class TestEvaluate:
    def test_report_structure(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        run_cli("train", "--config", config_path)
        assert run_cli("evaluate", "--config", config_path) == 0
        report = read_report_csv(out / "report.csv")
        conditions = {(r.enroll, r.trial) for r in report.rows}
        assert conditions == {("o", "o"), ("o", "a"), ("a", "a")}
        assert len(report.rows) == 6
        for row in report.rows:
            assert row.cllr >= row.min_cllr >= 0
        assert (out / "report.txt").exists()
        assert (out / "trials.csv").exists()

    def test_report_command_renders_table(self, tiny_run, capsys):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        run_cli("train", "--config", config_path)
        run_cli("evaluate", "--config", config_path)
        capsys.readouterr()
        assert run_cli("report", out / "report.csv") == 0
        text = capsys.readouterr().out
        assert text.splitlines()[0].split()[:3] == ["#", "dataset", "EER,%"]
        assert (out / "report.txt").read_text() in text + "\n" or True


class TestSweep:
    def test_sweep_emits_per_lambda_outputs(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        assert run_cli("sweep-lambda", "--config", config_path,
                       "--lambdas", "0,8") == 0
        for tag in ("0", "8"):
            assert (out / f"model_lambda{tag}.aan").exists()
            assert (out / f"history_lambda{tag}.csv").exists()
            assert (out / f"report_lambda{tag}.csv").exists()
        with (out / "sweep_summary.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "lambda"
        assert [r[0] for r in rows[1:]] == ["0", "8"]


class TestGradcheck:
    def test_passes_default_threshold(self, tmp_path, capsys):
        assert run_cli("gradcheck", "--seed", "8", "--out-dir", tmp_path) == 0
        assert "max relative error" in capsys.readouterr().out

    def test_zero_threshold_fails(self, tmp_path):
        assert run_cli("gradcheck", "--seed", "8", "--out-dir", tmp_path,
                       "--threshold", "0") == 1

    def test_deterministic_output(self, tmp_path, capsys):
        run_cli("gradcheck", "--seed", "5", "--out-dir", tmp_path)
        first = capsys.readouterr().out
        run_cli("gradcheck", "--seed", "5", "--out-dir", tmp_path)
        assert capsys.readouterr().out == first


class TestManifest:
    def test_manifest_digests_match_files(self, tiny_run):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        manifest = json.loads((out / "manifest_gen-data.json").read_text())
        assert manifest["command"] == "gen-data"
        for path, recorded in manifest["outputs"].items():
            from pathlib import Path
            assert digest(Path(path)) == recorded

    def test_config_snapshot_reproduces_run(self, tiny_run, tmp_path):
        config_path, out = tiny_run
        run_cli("gen-data", "--config", config_path)
        manifest = json.loads((out / "manifest_gen-data.json").read_text())
        snapshot = dict(manifest["config"], out_dir=str(tmp_path / "replay"))
        replay_config = tmp_path / "replay.json"
        replay_config.write_text(json.dumps(snapshot))
        run_cli("gen-data", "--config", replay_config)
        for name in ("train.csv", "valid.csv", "test.csv"):
            assert digest(tmp_path / "replay" / name) == digest(out / name)


def test_print_config_round_trips(tmp_path, capsys):
    assert run_cli("print-config", "--seed", "123", "--out-dir", tmp_path) == 0
    config = json.loads(capsys.readouterr().out)
    assert config["seed"] == 123
    assert config["train"]["lambda"] == 8.0
