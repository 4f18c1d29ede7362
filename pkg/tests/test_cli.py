"""CLI subcommands and exit codes."""

import json
import struct

import numpy as np
import pytest

from bnwrs.cli import main

CONFIG = {
    "name": "cli",
    "seed": 0,
    "architecture": {"kind": "mlp", "hidden": [12]},
    "dataset": {"kind": "synthetic", "k": 3, "dim": 6, "n": 300, "separation": 3.0},
    "optimizer": {"kind": "sgdm", "lr": 0.1},
    "regularizer": {"mode": "wrs", "lam": 1e-4, "tau": 5},
    "batch_size": 20,
    "epochs": 2,
    "metrics_every": 5,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return str(path)


class TestTrain:
    def test_train_and_analyze(self, tmp_path, config_path, capsys):
        out = str(tmp_path / "run")
        assert main(["train", "--config", config_path, "--out", out]) == 0
        assert "final test acc" in capsys.readouterr().out
        assert main(["analyze", "--run", out, "--kind", "norm_traj"]) == 0
        assert (tmp_path / "run" / "plot_norm_traj.csv").exists()

    def test_seed_override(self, tmp_path, config_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        main(["train", "--config", config_path, "--out", a])
        main(["train", "--config", config_path, "--out", b, "--seed", "9"])
        assert open(f"{a}/metrics.csv", "rb").read() != open(f"{b}/metrics.csv", "rb").read()

    def test_missing_config_is_exit_2(self, capsys):
        assert main(["train", "--config", "/does/not/exist.json"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_key_is_exit_2(self, tmp_path, capsys):
        bad = dict(CONFIG)
        bad["optimiser"] = {}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        assert main(["train", "--config", str(path)]) == 2

    def test_bad_idx_data_is_exit_3(self, tmp_path, capsys):
        img = tmp_path / "img"
        img.write_bytes(struct.pack(">IIII", 0x00000999, 1, 2, 2) + bytes(4))
        lab = tmp_path / "lab"
        lab.write_bytes(struct.pack(">II", 0x00000801, 1) + bytes(1))
        cfg = dict(CONFIG)
        cfg["dataset"] = {"kind": "idx", "images": str(img), "labels": str(lab)}
        path = tmp_path / "idx.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 3
        assert "data error" in capsys.readouterr().err

    def test_numerical_abort_is_exit_4(self, tmp_path, capsys):
        cfg = dict(CONFIG)
        cfg["optimizer"] = {"kind": "sgdm", "lr": 1e200}
        cfg["epochs"] = 3
        path = tmp_path / "explode.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 4
        err = capsys.readouterr().err
        assert "numerical abort" in err and "last good snapshot" in err


class TestSweep:
    def test_sweep_command(self, tmp_path, capsys):
        spec = {
            "base": CONFIG,
            "axes": {"regularizer.tau": [5, 10]},
            "replicas": 1,
        }
        spec_path = tmp_path / "sweep.json"
        spec_path.write_text(json.dumps(spec))
        out = str(tmp_path / "sweep")
        assert main(["sweep", "--spec", str(spec_path), "--out", out]) == 0
        assert (tmp_path / "sweep" / "sweep.csv").exists()
        assert main(["analyze", "--run", out, "--kind", "acc_vs_hyper"]) == 0


class TestVerifyDynamics:
    def test_passes_and_prints_one_line_per_check(self, capsys):
        assert main(["verify-dynamics", "--trials", "10"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 6
        assert "all 6 dynamics checks passed" in out
