"""End-to-end command-line tests: every subcommand runs in-process against
a tiny dataset, and failures map to the documented exit codes."""

import csv
import json

import numpy as np
import pytest

from emifusion.cli import main
from emifusion.model import load_checkpoint

TINY_CONFIG = {
    "seed": 3,
    "model": {
        "d_audio_in": 11, "d_vision_in": 10, "d_text_in": 9,
        "d_latent": 12, "head_count": 2, "mlp_hidden": 10,
        "head_dropout_p": 0.0, "modality_dropout_p": 0.0,
        "max_audio_len": 32, "max_vision_len": 32,
    },
    "train": {
        "batch_size": 12, "max_epochs": 2, "patience": 5,
        "base_lr": 1e-3,
    },
    "data": {
        "d_audio": 11, "d_vision": 10, "d_text": 9, "sigma": 0.1,
        "audio_len_range": [2, 4], "vision_len_range": [2, 3],
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cliws")
    cfg_path = ws / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    data_dir = ws / "data"
    rc = main(["gen-data", "--config", str(cfg_path),
               "--out", str(data_dir),
               "--n-train", "24", "--n-val", "10", "--n-test", "8"])
    assert rc == 0
    return ws, cfg_path, data_dir


@pytest.fixture(scope="module")
def trained(workspace):
    ws, cfg_path, data_dir = workspace
    run_dir = ws / "run"
    rc = main(["train", "--config", str(cfg_path),
               "--manifest", str(data_dir / "manifest.json"),
               "--out", str(run_dir)])
    assert rc == 0
    return run_dir


class TestGenData:
    def test_outputs_exist_with_counts(self, workspace):
        _, _, data_dir = workspace
        for name in ("train", "val", "test"):
            assert (data_dir / f"{name}.jsonl").exists()
        assert (data_dir / "manifest.json").exists()
        resolved = json.loads((data_dir / "config.json").read_text())
        assert resolved["command"] == "gen-data"
        assert resolved["data"]["d_audio"] == 11
        assert resolved["data"]["n_train"] == 24

    def test_refuses_overwrite_without_flag(self, workspace, capsys):
        _, cfg_path, data_dir = workspace
        rc = main(["gen-data", "--config", str(cfg_path),
                   "--out", str(data_dir),
                   "--n-train", "4", "--n-val", "4", "--n-test", "4"])
        assert rc == 2
        assert "overwrite" in capsys.readouterr().err

    def test_overwrite_flag_allows_replacement(self, workspace, tmp_path):
        _, cfg_path, _ = workspace
        out = tmp_path / "d2"
        args = ["gen-data", "--config", str(cfg_path), "--out", str(out),
                "--n-train", "4", "--n-val", "4", "--n-test", "4"]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--overwrite"]) == 0

    def test_out_root_env_resolves_relative_paths(self, workspace,
                                                  tmp_path, monkeypatch):
        _, cfg_path, _ = workspace
        monkeypatch.setenv("EMIFUSION_OUT_ROOT", str(tmp_path))
        rc = main(["gen-data", "--config", str(cfg_path), "--out", "rel",
                   "--n-train", "4", "--n-val", "4", "--n-test", "4"])
        assert rc == 0
        assert (tmp_path / "rel" / "manifest.json").exists()

    def test_set_override_lands_in_resolved_config(self, workspace,
                                                   tmp_path):
        _, cfg_path, _ = workspace
        out = tmp_path / "d3"
        rc = main(["gen-data", "--config", str(cfg_path), "--out", str(out),
                   "--n-train", "4", "--n-val", "4", "--n-test", "4",
                   "--set", "data.sigma=0.25"])
        assert rc == 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["data"]["sigma"] == 0.25


class TestTrain:
    def test_writes_history_and_checkpoint(self, trained, workspace):
        run_dir = trained
        with open(run_dir / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert float(rows[1]["train_loss"]) < float(rows[0]["train_loss"])
        model, state = load_checkpoint(run_dir / "best.ckpt")
        assert model.config.d_latent == 12
        assert state is not None
        resolved = json.loads((run_dir / "config.json").read_text())
        assert resolved["train"]["max_epochs"] == 2

    def test_refuses_existing_outputs(self, trained, workspace):
        _, cfg_path, data_dir = workspace
        rc = main(["train", "--config", str(cfg_path),
                   "--manifest", str(data_dir / "manifest.json"),
                   "--out", str(trained)])
        assert rc == 2

    def test_resume_continues_to_horizon(self, workspace, tmp_path,
                                         capsys):
        _, cfg_path, data_dir = workspace
        first = tmp_path / "first"
        rc = main(["train", "--config", str(cfg_path),
                   "--manifest", str(data_dir / "manifest.json"),
                   "--out", str(first), "--run-epochs", "1"])
        assert rc == 0
        second = tmp_path / "second"
        rc = main(["train", "--config", str(cfg_path),
                   "--manifest", str(data_dir / "manifest.json"),
                   "--out", str(second),
                   "--resume", str(first / "best.ckpt")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "resuming from" in out
        with open(second / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["epoch"] for r in rows] == ["2"]

    def test_missing_manifest_is_io_error(self, workspace, tmp_path):
        _, cfg_path, _ = workspace
        rc = main(["train", "--config", str(cfg_path),
                   "--manifest", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "r")])
        assert rc == 5


class TestEval:
    def test_manifest_split_and_json_output(self, trained, workspace,
                                            tmp_path, capsys):
        _, _, data_dir = workspace
        out_json = tmp_path / "metrics.json"
        rc = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
                   "--manifest", str(data_dir / "manifest.json"),
                   "--split", "test", "--out", str(out_json)])
        assert rc == 0
        assert "mean rho" in capsys.readouterr().out
        payload = json.loads(out_json.read_text())
        assert len(payload["rho_per_dim"]) == 6
        assert payload["n_samples"] == 8

    def test_records_file_directly(self, trained, workspace):
        _, _, data_dir = workspace
        rc = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
                   "--records", str(data_dir / "val.jsonl")])
        assert rc == 0

    def test_requires_exactly_one_source(self, trained, workspace):
        _, _, data_dir = workspace
        ckpt = str(trained / "best.ckpt")
        assert main(["eval", "--checkpoint", ckpt]) == 2
        assert main(["eval", "--checkpoint", ckpt,
                     "--records", str(data_dir / "val.jsonl"),
                     "--manifest", str(data_dir / "manifest.json")]) == 2

    def test_corrupted_records_exit_data(self, trained, workspace,
                                         tmp_path, capsys):
        _, _, data_dir = workspace
        bad = tmp_path / "bad.jsonl"
        lines = (data_dir / "val.jsonl").read_text().splitlines()
        lines[1] = lines[1][:-7]
        bad.write_text("\n".join(lines) + "\n")
        rc = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
                   "--records", str(bad)])
        assert rc == 3
        assert "line 2" in capsys.readouterr().err

    def test_unknown_split_exit_data(self, trained, workspace):
        _, _, data_dir = workspace
        rc = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
                   "--manifest", str(data_dir / "manifest.json"),
                   "--split", "holdout"])
        assert rc == 3

    def test_missing_checkpoint_exit_io(self, workspace, tmp_path):
        _, _, data_dir = workspace
        rc = main(["eval", "--checkpoint", str(tmp_path / "ghost.ckpt"),
                   "--records", str(data_dir / "val.jsonl")])
        assert rc == 5

    def test_truncated_checkpoint_exit_io(self, trained, workspace,
                                          tmp_path):
        _, _, data_dir = workspace
        blob = (trained / "best.ckpt").read_bytes()
        stub = tmp_path / "cut.ckpt"
        stub.write_bytes(blob[: len(blob) // 2])
        rc = main(["eval", "--checkpoint", str(stub),
                   "--records", str(data_dir / "val.jsonl")])
        assert rc == 5


class TestAblate:
    def test_all_variants_trained_and_tabulated(self, workspace, tmp_path,
                                                capsys):
        _, cfg_path, data_dir = workspace
        out = tmp_path / "abl"
        rc = main(["ablate", "--config", str(cfg_path),
                   "--manifest", str(data_dir / "manifest.json"),
                   "--out", str(out), "--run-epochs", "1"])
        assert rc == 0
        with open(out / "ablation.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["variant"] for r in rows] == [
            "full", "simple_concat", "self_attention_only",
            "no_missing_tokens", "no_modality_dropout",
            "audio_anchored", "vision_anchored"]
        assert float(rows[0]["delta_vs_full"]) == 0.0
        table = (out / "ablation.txt").read_text()
        assert "simple_concat" in table
        assert "vision_anchored" in capsys.readouterr().out


class TestGradcheck:
    def test_default_compact_model_passes(self, capsys):
        rc = main(["gradcheck", "--seed", "0", "--coords", "3"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out

    def test_report_file_written(self, tmp_path):
        out = tmp_path / "gc.txt"
        rc = main(["gradcheck", "--seed", "1", "--coords", "2",
                   "--out", str(out)])
        assert rc == 0
        assert "PASS" in out.read_text()


class TestConfigHandling:
    def test_malformed_set_syntax(self, workspace, tmp_path):
        _, cfg_path, _ = workspace
        rc = main(["gen-data", "--config", str(cfg_path),
                   "--out", str(tmp_path / "x"), "--set", "sigma0.2"])
        assert rc == 2
        rc = main(["gen-data", "--config", str(cfg_path),
                   "--out", str(tmp_path / "x"),
                   "--set", "nosuchsection.key=1"])
        assert rc == 2

    def test_unknown_config_section(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"optimizer": {}}))
        rc = main(["gen-data", "--config", str(bad),
                   "--out", str(tmp_path / "x")])
        assert rc == 3

    def test_unknown_model_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        cfg = json.loads(json.dumps(TINY_CONFIG))
        cfg["model"]["n_layers"] = 4
        bad.write_text(json.dumps(cfg))
        rc = main(["gradcheck", "--config", str(bad)])
        assert rc == 3

    def test_missing_config_file_is_io_error(self, tmp_path):
        rc = main(["gen-data", "--config", str(tmp_path / "ghost.json"),
                   "--out", str(tmp_path / "x")])
        assert rc == 5

    def test_bad_json_config_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["gen-data", "--config", str(bad),
                   "--out", str(tmp_path / "x")])
        assert rc == 3

    def test_seed_flag_beats_config(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY_CONFIG))
        out = tmp_path / "seeded"
        rc = main(["gen-data", "--config", str(cfg_path),
                   "--out", str(out), "--seed", "42",
                   "--n-train", "4", "--n-val", "4", "--n-test", "4"])
        assert rc == 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["seed"] == 42
        assert resolved["data"]["seed"] == 42

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
