import os

import numpy as np
import pandas as pd
import pytest

from app import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, run
from config import load_config

TINY_MODEL = ["model.nt=4, 4", "model.gr=0.6", "model.dec_gr=0.6", "model.lc=4", "model.enc_mlp=8",
              "model.dec_mlp=8", "model.out_mlp=8", "model.attn_dim=4", "model.geo_width=4", "model.geo_mlp=8",
              "model.tl=2", "model.ths=8", "model.head=2", "model.ffn=16"]


def sets(*items):
    return [arg for item in items for arg in ("--set", item)]


class Runner:
    def __init__(self, root):
        self.root = root

    def __call__(self, *argv):
        """(exit code, run directory or None)"""
        before = set(os.listdir(self.root)) if os.path.isdir(self.root) else set()
        code = run([*argv, "--run_dir", str(self.root)])
        after = set(os.listdir(self.root)) if os.path.isdir(self.root) else set()
        new = sorted(after - before)
        return code, os.path.join(self.root, new[0]) if new else None


@pytest.fixture
def cli(tmp_path):
    return Runner(str(tmp_path / "runs"))


@pytest.fixture
def data_path(cli, tmp_path):
    path = str(tmp_path / "poisson.gds")
    code, _ = cli("generate", "--out", path, "--points", "64", "--n_samples", "6", *sets("data.n_test=2"))
    assert code == EXIT_OK
    return path


@pytest.fixture
def checkpoint(cli, data_path):
    code, run_dir = cli("train", "--data", data_path, "--epochs", "2", "--batch", "2", *sets(*TINY_MODEL))
    assert code == EXIT_OK
    return os.path.join(run_dir, "checkpoints", "final.gck")


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["train", "--bogus", "1"],
        ["generate", "--set", "data.points"],
        ["generate", "--set", "data.bogus=1"],
        ["generate", "--config", "/nonexistent/run.cfg"],
        ["evaluate", "--checkpoint", "/nonexistent/final.gck"],
        ["train", "--data", "/nonexistent/data.gds"],
    ])
    def test_usage_errors(self, cli, argv):
        code, _ = cli(*argv)
        assert code == EXIT_USAGE

    def test_runtime_failure(self, cli, tmp_path):
        code, run_dir = cli("generate", "--out", str(tmp_path / "x.gds"), "--points", "32")
        assert code == EXIT_FAILURE
        assert os.path.exists(os.path.join(run_dir, "manifest.cfg"))


class TestGenerate:
    def test_deterministic(self, cli, tmp_path):
        paths = [str(tmp_path / f"{name}.gds") for name in ("a", "b")]
        for path in paths:
            code, _ = cli("generate", "--out", path, "--points", "64", "--n_samples", "3", "--seed", "5",
                          *sets("data.n_test=1"))
            assert code == EXIT_OK
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            assert a.read() == b.read()

    def test_manifest_is_a_valid_config(self, cli, tmp_path):
        out = str(tmp_path / "m.gds")
        code, run_dir = cli("generate", "--out", out, "--points", "64", "--n_samples", "3", "--seed", "9",
                            *sets("data.n_test=1", "model.tl=2"))
        assert code == EXIT_OK
        assert os.path.basename(run_dir).endswith("-seed9-generate")
        manifest = os.path.join(run_dir, "manifest.cfg")
        with open(manifest, encoding="utf-8") as f:
            assert f.readline() == "# command = generate\n"
        rc = load_config(manifest)
        assert (rc.run.seed, rc.data.out, rc.data.n_samples, rc.model.tl) == (9, out, 3, 2)


class TestPipeline:
    def test_train_outputs(self, cli, checkpoint):
        run_dir = os.path.dirname(os.path.dirname(checkpoint))
        assert os.path.exists(checkpoint)
        metrics = pd.read_csv(os.path.join(run_dir, "metrics.csv"))
        assert metrics["epoch"].tolist() == [0, 1]
        assert os.path.exists(os.path.join(run_dir, "loss.svg"))
        assert load_config(os.path.join(run_dir, "manifest.cfg")).model.nt == (4, 4)

    def test_evaluate(self, cli, checkpoint, data_path):
        code, run_dir = cli("evaluate", "--checkpoint", checkpoint, "--data", data_path)
        assert code == EXIT_OK
        frame = pd.read_csv(os.path.join(run_dir, "eval_poisson.csv"))
        assert len(frame) == 2 and np.all(frame["rel_l1"] >= 0)
        with open(os.path.join(run_dir, "summary_poisson.txt"), encoding="utf-8") as f:
            assert f.readline() == "[summary]\n"

    def test_resolution_sweep(self, cli, checkpoint, data_path, tmp_path):
        fine = str(tmp_path / "poisson_96.gds")
        assert cli("generate", "--out", fine, "--points", "96", "--n_samples", "4", *sets("data.n_test=2"))[0] == 0
        code, run_dir = cli("evaluate", "--checkpoint", checkpoint, *sets(f"eval.datasets={data_path}, {fine}"))
        assert code == EXIT_OK
        sweep = pd.read_csv(os.path.join(run_dir, "resolution.csv"))
        assert sweep["points"].tolist() == [64, 96]
        assert os.path.exists(os.path.join(run_dir, "resolution.svg"))

    def test_infer(self, cli, checkpoint, data_path):
        code, run_dir = cli("infer", "--checkpoint", checkpoint, "--data", data_path)
        assert code == EXIT_OK
        with np.load(os.path.join(run_dir, "predictions.npz")) as npz:
            preds = [k for k in npz.files if k.startswith("sample_")]
            assert len(preds) == 2
            assert npz[preds[0]].shape == (64, 1)

    def test_bench(self, cli):
        code, run_dir = cli("bench", "--sizes", "64, 96", "--repeats", "1", "--warmup", "0", *sets(*TINY_MODEL))
        assert code == EXIT_OK
        frame = pd.read_csv(os.path.join(run_dir, "bench.csv"))
        assert frame["points"].tolist() == [64, 96]
        assert np.all(frame["ms_per_sample"] > 0)

    def test_ablate_grid(self, cli, tmp_path):
        data = str(tmp_path / "abl.gds")
        code, run_dir = cli("ablate", "--data", data, "--epochs", "1", "--seeds", "0",
                            *sets("data.n_samples=4", "data.points=64", "data.n_test=1", *TINY_MODEL))
        assert code == EXIT_OK
        grid = pd.read_csv(os.path.join(run_dir, "ablation.csv"))
        assert len(grid) == 18
        assert set(grid["embedding"]) == {"statistical", "pointnet", "none"}
        assert grid["score"].max() == 1.0
        assert os.path.exists(data)
