# routes.py - Command handlers for the GAOT pipeline
import itertools
import logging
import os
from dataclasses import replace
from datetime import datetime
from typing import Callable

import numpy as np
import pandas as pd

from config import VERSION, Config, RunConfig, derive_seed, emit_config
from models.errors import ConfigError, GaotError
from models.gaot_net import GaotConfig

from .evaluation import (bench as bench_model, evaluate as evaluate_model, normalized_scores, plot_ablation,
                         plot_history, plot_resolution, predict_sample)
from .model_loader import build_model, load_checkpoint
from .neighbor_cache import NeighborCache
from .pde_data import DatasetFile, generate_dataset
from .trainer import ScheduleConfig, Trainer

logger = logging.getLogger(__name__)


class Commands:
    """Registry of pipeline commands, filled by the ``@main.command`` decorator"""

    def __init__(self, name: str):
        self.name = name
        self.handlers: dict = {}

    def command(self, name: str, help: str = "", flags: tuple = ()):
        """``flags`` are (option, section, key, help) tuples mapped onto the run config"""
        def decorator(fn: Callable[[RunConfig, str], None]):
            self.handlers[name] = (fn, help, flags)
            return fn
        return decorator


main = Commands('main')

CHECKPOINT_FLAG = ("--checkpoint", "eval", "checkpoint", "checkpoint file to load")
DATA_FLAG = ("--data", "data", "out", "dataset file")
EVAL_FLAGS = (
    ("--split", "eval", "split", "train, val or test"),
    ("--mode", "eval", "mode", "DR (direct) or AR (autoregressive)"),
    ("--ar_dt", "eval", "ar_dt", "autoregressive time increment (default: snapshot spacing)"),
    ("--t0", "eval", "t0", "start time of the rollout"),
)


# ---------------------------------------------------------------------------
# Run directories and shared plumbing
# ---------------------------------------------------------------------------

def make_run_dir(command: str, seed: int, root: str = "") -> str:
    """<root>/<timestamp>-seed<seed>-<command>, suffixed if it already exists"""
    root = root or Config.output_dir()
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{stamp}-seed{seed}-{command}")
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    os.makedirs(path)
    return path


def write_manifest(run_dir: str, command: str, rc: RunConfig, argv=()) -> str:
    """Config echo plus provenance comments; the file itself is a valid run config"""
    header = [
        f"# command = {command}",
        f"# version = {VERSION}",
        f"# seed = {rc.run.seed}",
        f"# argv = {' '.join(argv)}",
        "",
    ]
    path = os.path.join(run_dir, "manifest.cfg")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + emit_config(rc))
    return path


def read_dataset(path: str) -> DatasetFile:
    if not path or not os.path.exists(path):
        raise ConfigError(f"[data] out: dataset file '{path}' not found (run 'generate' first)")
    return DatasetFile.read(path)


def load_or_generate(rc: RunConfig) -> DatasetFile:
    if os.path.exists(rc.data.out):
        return DatasetFile.read(rc.data.out)
    logger.info("⚠️ %s missing, generating it", rc.data.out)
    dataset = _generate(rc)
    dataset.write(rc.data.out)
    return dataset


def _generate(rc: RunConfig, points=None, n_samples=None, n_test=None, label="data") -> DatasetFile:
    d = rc.data
    seed = rc.seed_for("data") if label == "data" else derive_seed(rc.seed_for("data"), label)
    return generate_dataset(d.generator, d.n_samples if n_samples is None else n_samples,
                            d.points if points is None else points, seed,
                            n_val=d.n_val if n_test is None else 0, n_test=d.n_test if n_test is None else n_test,
                            n_jobs=d.n_jobs, sines_k=d.sines_k, sines_r=d.sines_r, snapshots=d.snapshots)


def fit_to_dataset(cfg: GaotConfig, dataset: DatasetFile) -> GaotConfig:
    """Take coordinate dimension, channel counts and time dependence from the data"""
    wanted = dict(coord_dim=dataset.coord_dim, in_channels=dataset.in_channels,
                  out_channels=dataset.out_channels, time_dependent=dataset.time_dependent)
    changed = {k: v for k, v in wanted.items() if getattr(cfg, k) != v}
    if not changed:
        return cfg
    logger.info("Model shape taken from dataset: %s", changed)
    if "coord_dim" in changed and cfg.strategy == "I" and len(cfg.nt) != dataset.coord_dim:
        changed["nt"] = (cfg.nt[0],) * dataset.coord_dim
    return replace(cfg, **changed)


def schedule_for(rc: RunConfig, epochs=None) -> ScheduleConfig:
    t = rc.train
    return ScheduleConfig(t.epochs if epochs is None else epochs, t.warmup_frac, t.cosine_frac,
                          t.lr_start, t.lr_peak, t.lr_cos_end, t.lr_final)


def require_checkpoint(rc: RunConfig):
    if not rc.eval.checkpoint:
        raise ConfigError("[eval] checkpoint: no checkpoint given")
    if not os.path.exists(rc.eval.checkpoint):
        raise ConfigError(f"[eval] checkpoint: '{rc.eval.checkpoint}' not found")
    return load_checkpoint(rc.eval.checkpoint)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@main.command('generate', help="Generate a dataset file",
              flags=(("--out", "data", "out", "output dataset file"),
                     ("--generator", "data", "generator", "poisson_gauss, poisson_sines_disk or diffusion"),
                     ("--n_samples", "data", "n_samples", "number of samples"),
                     ("--points", "data", "points", "points per sample")))
def generate(rc: RunConfig, run_dir: str) -> None:
    dataset = _generate(rc)
    dataset.write(rc.data.out)
    logger.info("✅ Dataset written: %s (%d train / %d val / %d test)", rc.data.out,
                dataset.train.size, dataset.val.size, dataset.test.size)


@main.command('train', help="Train a model on a dataset file",
              flags=(DATA_FLAG,
                     ("--epochs", "train", "epochs", "number of epochs"),
                     ("--batch", "train", "batch", "samples per batch"),
                     ("--checkpoint_dir", "train", "checkpoint_dir", "where checkpoints go (default: run dir)")))
def train(rc: RunConfig, run_dir: str) -> None:
    dataset = read_dataset(rc.data.out)
    rc.model = fit_to_dataset(rc.model, dataset)
    model = build_model(rc.model, derive_seed(rc.run.seed, "model"))
    t = rc.train
    trainer = Trainer(model, dataset, schedule_for(rc), batch=t.batch, seed=rc.seed_for("train"),
                      weight_decay=t.weight_decay, search=NeighborCache(),
                      checkpoint_dir=t.checkpoint_dir or os.path.join(run_dir, "checkpoints"),
                      checkpoint_every=t.checkpoint_every, log_every=t.log_every, profile=rc.model_profile)
    trainer.prepare()
    history = trainer.fit()
    history.write_csv(os.path.join(run_dir, "metrics.csv"))
    if rc.eval.plot and history.rows:
        plot_history(history.to_frame(), os.path.join(run_dir, "loss.svg"))
    logger.info("💾 Final checkpoint: %s", trainer.last_checkpoint)


@main.command('evaluate', help="Median relative L1 of a checkpoint on one or more datasets",
              flags=(CHECKPOINT_FLAG, DATA_FLAG, *EVAL_FLAGS,
                     ("--datasets", "eval", "datasets", "comma-separated dataset files for a resolution sweep")))
def evaluate(rc: RunConfig, run_dir: str) -> None:
    model = require_checkpoint(rc)
    cache = NeighborCache()
    paths = rc.eval.datasets or (rc.data.out,)
    sweep = []
    for path in paths:
        dataset = read_dataset(path)
        report = evaluate_model(model, dataset, rc.eval.split, rc.eval.mode, rc.eval.ar_dt, rc.eval.t0, cache)
        stem = os.path.splitext(os.path.basename(path))[0]
        report.config.update(dataset=path, checkpoint=rc.eval.checkpoint)
        report.write(os.path.join(run_dir, f"eval_{stem}.csv"), os.path.join(run_dir, f"summary_{stem}.txt"))
        sweep.append(dict(dataset=path, points=dataset.samples[0].n_points, rel_l1=report.error))
    if len(sweep) > 1:
        frame = pd.DataFrame(sweep).sort_values("points")
        frame.to_csv(os.path.join(run_dir, "resolution.csv"), index=False, float_format="%.17g")
        if rc.eval.plot:
            plot_resolution(frame["points"].tolist(), frame["rel_l1"].tolist(),
                            os.path.join(run_dir, "resolution.svg"))


@main.command('infer', help="Write predictions of a split to a compressed .npz",
              flags=(CHECKPOINT_FLAG, DATA_FLAG, *EVAL_FLAGS))
def infer(rc: RunConfig, run_dir: str) -> None:
    model = require_checkpoint(rc)
    model.eval()
    dataset = read_dataset(rc.data.out)
    cache = NeighborCache()
    arrays = {}
    for i in dataset.split_indices(rc.eval.split):
        s = dataset.samples[int(i)]
        graph = model.build_graph(s.points, search=cache, rng_seed=int(i))
        pred, _ = predict_sample(model, s, graph, rc.eval.mode, rc.eval.ar_dt, rc.eval.t0)
        arrays[f"sample_{int(i)}"] = pred.numpy()
        arrays[f"points_{int(i)}"] = s.points
    if not arrays:
        raise GaotError(f"split '{rc.eval.split}' is empty")
    path = os.path.join(run_dir, "predictions.npz")
    np.savez_compressed(path, **arrays)
    logger.info("✅ %d predictions written to %s", len(arrays) // 2, path)


@main.command('bench', help="Training throughput or inference latency across point counts",
              flags=(CHECKPOINT_FLAG,
                     ("--mode", "bench", "mode", "train or infer"),
                     ("--sizes", "bench", "sizes", "comma-separated point counts"),
                     ("--repeats", "bench", "repeats", "timed repetitions"),
                     ("--warmup", "bench", "warmup", "untimed warmup repetitions")))
def bench(rc: RunConfig, run_dir: str) -> None:
    b = rc.bench
    rows = []
    for size in b.sizes:
        dataset = _generate(rc, points=size, n_samples=max(b.batch, 1) + 1, n_test=0, label=f"bench:{size}")
        if rc.eval.checkpoint:
            model = require_checkpoint(rc)
        else:
            model = build_model(fit_to_dataset(rc.model, dataset), derive_seed(rc.run.seed, "model"))
        if not model.is_normalized:
            Trainer(model, dataset, ScheduleConfig(1)).prepare()
        stats = bench_model(model, dataset, b.mode, b.warmup, b.repeats, b.batch)
        rows.append(vars(stats))
    pd.DataFrame(rows).to_csv(os.path.join(run_dir, "bench.csv"), index=False, float_format="%.17g")


@main.command('ablate', help="Train and score the scales x embedding x stepping grid",
              flags=(DATA_FLAG,
                     ("--epochs", "ablate", "epochs", "epochs per variant"),
                     ("--seeds", "ablate", "seeds", "comma-separated seeds averaged per variant")))
def ablate(rc: RunConfig, run_dir: str) -> None:
    a = rc.ablate
    dataset = load_or_generate(rc)
    base = fit_to_dataset(rc.model, dataset)
    cache = NeighborCache()
    scale_options = (("single", (1.0,)), ("multi", tuple(a.multiscale)))
    rows = []
    for (label, scales), embedding, stepping in itertools.product(scale_options, a.embeddings, a.steppings):
        cfg = replace(base, scales=scales, geo_emb=embedding, stepping=stepping)
        errors = []
        for seed in a.seeds:
            model = build_model(cfg, derive_seed(seed, "model"))
            trainer = Trainer(model, dataset, schedule_for(rc, a.epochs), batch=rc.train.batch,
                              seed=derive_seed(seed, "train"), weight_decay=rc.train.weight_decay,
                              search=cache, log_every=max(a.epochs, 1))
            trainer.prepare()
            trainer.fit()
            report = evaluate_model(model, dataset, "test", rc.eval.mode, rc.eval.ar_dt, rc.eval.t0, cache)
            errors.append(report.error)
        rows.append(dict(scales=label, embedding=embedding, stepping=stepping, seeds=len(errors),
                         rel_l1=float(np.mean(errors)), rel_l1_std=float(np.std(errors))))
        logger.info("🧪 %s / %s / %s: %.4f", label, embedding, stepping, rows[-1]["rel_l1"])
    grid = pd.DataFrame(rows)
    grid["score"] = normalized_scores(grid["rel_l1"].to_numpy())
    grid.to_csv(os.path.join(run_dir, "ablation.csv"), index=False, float_format="%.17g")
    if rc.eval.plot:
        plot_ablation(grid, os.path.join(run_dir, "ablation.svg"))
    logger.info("✅ Ablation grid: %d variants", len(grid))
