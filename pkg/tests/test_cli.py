"""Command-line interface tests: every subcommand end to end on tiny
configs, config round trips, error exits, and reproducibility of runs."""

import json
import os

import numpy as np
import pytest

from circuitae import cli
from circuitae import dataio


TINY_CONFIG = {
    "data": {"source": "bundled-tabular"},
    "model": {
        "builder": {
            "builder": "tabular",
            "num_data_vars": 16,
            "embedding_dim": 2,
            "depth": 2,
            "repetitions": 1,
            "channels": 2,
        },
        "decoder": {
            "kind": "mlp",
            "in_dim": 2,
            "out_dim": 16,
            "hidden": [8],
            "channels": [32, 16],
            "height": 0,
            "width": 0,
        },
        "vae_encoder_hidden": [8],
    },
    "train": {"iterations": 5, "batch_size": 16},
    "eval": {"seeds": 2, "levels": [0.0, 0.5]},
    "bench": {"dims": [4], "iterations": 20, "seeds": 1},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg_path = d / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "train"
    code = cli.cli_dispatch(
        ["train", "--config", str(workdir / "config.json"),
         "--out", str(out)]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_vae(workdir):
    out = workdir / "train-vae"
    code = cli.cli_dispatch(
        ["train-vae", "--config", str(workdir / "config.json"),
         "--out", str(out)]
    )
    assert code == 0
    return out


class TestConfig:

    def test_defaults_round_trip(self):
        cfg = cli.load_config()
        assert cli.parse_config(cli.serialize_config(cfg)) == cfg

    def test_file_overrides_are_merged(self, workdir):
        cfg = cli.load_config(workdir / "config.json")
        assert cfg["train"]["iterations"] == 5
        assert cfg["train"]["lr_circuit"] == 0.1  # default retained
        assert cfg["data"]["source"] == "bundled-tabular"

    def test_unknown_subcommand_exits_nonzero(self, capsys):
        assert cli.cli_dispatch(["frobnicate"]) != 0
        capsys.readouterr()

    def test_unknown_data_source_reports_error(self, workdir, capsys):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"data": {"source": "nope"}}))
        code = cli.cli_dispatch(
            ["train", "--config", str(bad), "--out", str(workdir / "x")]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:

    def test_artifacts(self, trained, capsys):
        assert (trained / "metrics.jsonl").exists()
        assert (trained / "model.ckpt").exists()
        assert (trained / "config.json").exists()
        hist = dataio.read_metrics(trained / "metrics.jsonl")
        assert len(hist) == 5
        assert all(np.isfinite(h["total"]) for h in hist)

    def test_identical_config_and_seed_reproduce_metrics(self, workdir):
        outs = []
        for name in ("repro-a", "repro-b"):
            out = workdir / name
            code = cli.cli_dispatch(
                ["train", "--config", str(workdir / "config.json"),
                 "--seed", "3", "--out", str(out)]
            )
            assert code == 0
            outs.append(dataio.read_metrics(out / "metrics.jsonl"))
        assert outs[0] == outs[1]

    def test_iteration_flag_overrides_config(self, workdir):
        out = workdir / "short"
        code = cli.cli_dispatch(
            ["train", "--config", str(workdir / "config.json"),
             "--iterations", "2", "--out", str(out)]
        )
        assert code == 0
        assert len(dataio.read_metrics(out / "metrics.jsonl")) == 2


class TestTrainVae:

    def test_artifacts(self, trained_vae):
        assert (trained_vae / "vae.ckpt").exists()
        loaded = dataio.load_checkpoint(trained_vae / "vae.ckpt")
        assert "vae" in loaded


class TestDistill:

    def test_runs_from_vae_teacher(self, workdir, trained_vae, capsys):
        out = workdir / "distill"
        code = cli.cli_dispatch(
            ["distill", "--config", str(workdir / "config.json"),
             "--teacher", str(trained_vae / "vae.ckpt"),
             "--out", str(out)]
        )
        assert code == 0
        assert (out / "student.ckpt").exists()
        capsys.readouterr()

    def test_rejects_non_vae_teacher(self, workdir, trained, capsys):
        code = cli.cli_dispatch(
            ["distill", "--config", str(workdir / "config.json"),
             "--teacher", str(trained / "model.ckpt"),
             "--out", str(workdir / "d2")]
        )
        assert code == 1
        assert "no VAE" in capsys.readouterr().err


class TestEval:

    def test_single_level_mcar_table(self, workdir, trained, capsys):
        out = workdir / "eval"
        code = cli.cli_dispatch(
            ["eval", "--config", str(workdir / "config.json"),
             "--checkpoint", str(trained / "model.ckpt"),
             "--corruption", "mcar:0.5", "--out", str(out)]
        )
        assert code == 0
        table = (out / "sweep.tsv").read_text()
        lines = table.strip().splitlines()
        assert lines[0].startswith("level\tmse_mean")
        assert lines[1].startswith("0.50\t")
        printed = capsys.readouterr().out
        assert "mse_auc" in printed

    def test_bad_corruption_spec_errors(self, workdir, trained, capsys):
        code = cli.cli_dispatch(
            ["eval", "--config", str(workdir / "config.json"),
             "--checkpoint", str(trained / "model.ckpt"),
             "--corruption", "gaussian:0.5", "--out", str(workdir / "e2")]
        )
        assert code == 1
        assert "bad corruption spec" in capsys.readouterr().err


class TestSample:

    def test_tabular_samples_tsv(self, workdir, trained, capsys):
        out = workdir / "sample"
        code = cli.cli_dispatch(
            ["sample", "--config", str(workdir / "config.json"),
             "--checkpoint", str(trained / "model.ckpt"),
             "--num-samples", "6", "--out", str(out)]
        )
        assert code == 0
        rows = (out / "samples.tsv").read_text().strip().splitlines()
        assert len(rows) == 6
        assert len(rows[0].split("\t")) == 16
        capsys.readouterr()


class TestOod:

    def test_requires_circuit_checkpoint(self, workdir, trained_vae, capsys):
        code = cli.cli_dispatch(
            ["ood", "--config", str(workdir / "config.json"),
             "--checkpoint", str(trained_vae / "vae.ckpt"),
             "--out", str(workdir / "ood")]
        )
        assert code == 1
        assert "circuit" in capsys.readouterr().err


class TestSimpleBench:

    def test_writes_table(self, workdir, capsys):
        out = workdir / "bench"
        code = cli.cli_dispatch(
            ["simple-bench", "--config", str(workdir / "config.json"),
             "--out", str(out)]
        )
        assert code == 0
        table = (out / "bench.tsv").read_text()
        assert "simple" in table and "gumbel-softmax" in table
        capsys.readouterr()


class TestValidate:

    def test_valid_checkpoint(self, workdir, trained, capsys):
        code = cli.cli_dispatch(
            ["validate", "--config", str(workdir / "config.json"),
             "--checkpoint", str(trained / "model.ckpt")]
        )
        assert code == 0
        assert "valid" in capsys.readouterr().out

    def test_missing_checkpoint_errors(self, workdir, capsys):
        code = cli.cli_dispatch(
            ["validate", "--checkpoint", str(workdir / "nope.ckpt")]
        )
        assert code == 1
        capsys.readouterr()
