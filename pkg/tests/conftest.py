import os

import numpy as np
import pytest
import torch

from app.pde_data import DatasetFile, TrajectorySample, generate_dataset
from models.gaot_net import GAOT, GaotConfig
from models.stepping import fit_normalization

RUN_SLOW = os.environ.get("GAOT_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow acceptance run; set GAOT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    """Keep neighborhood caches and run directories inside the test's tmp dir"""
    monkeypatch.setenv("GAOT_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("GAOT_OUTPUT_DIR", str(tmp_path / "outputs"))
    torch.manual_seed(0)


def tiny_config(**overrides) -> GaotConfig:
    """A model small enough to train for a few epochs inside a unit test"""
    base = dict(nt=(4, 4), gr=0.6, dec_gr=0.6, lc=4, enc_mlp=(8,), dec_mlp=(8,), out_mlp=(8,),
                attn_dim=4, geo_width=4, geo_mlp=(8,), ps=2, tl=2, ths=8, head=2, ffn=16)
    base.update(overrides)
    return GaotConfig(**base)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def poisson_dataset() -> DatasetFile:
    return generate_dataset("poisson_gauss", n_samples=6, points=64, seed=3, n_test=2)


@pytest.fixture(scope="session")
def diffusion_dataset() -> DatasetFile:
    return generate_dataset("diffusion", n_samples=4, points=48, seed=5, n_test=1, snapshots=3)


def random_sample(rng, n_points=24, times=(0.0,), in_channels=1, out_channels=1) -> TrajectorySample:
    times = np.asarray(times, dtype=np.float64)
    return TrajectorySample(rng.uniform(-1.0, 1.0, size=(n_points, 2)),
                            rng.normal(size=(n_points, in_channels)),
                            rng.normal(size=(times.size, n_points, out_channels)), times)


def fitted_model(config: GaotConfig, samples, seed: int = 0) -> GAOT:
    """Tiny model with geometry normalizers and Z-score statistics fitted on ``samples``"""
    torch.manual_seed(seed)
    model = GAOT(config)
    graphs = [model.build_graph(s.points) for s in samples]
    model.fit_geometry(graphs)
    model.set_normalization(fit_normalization(samples, config.effective_stepping, config.time_dependent))
    model.eval()
    return model
