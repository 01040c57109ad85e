# app/evaluation.py - Metrics, inference modes, benchmarking and plots
import copy
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import seaborn as sns
import torch

from models import autodiff as ad
from models.errors import GaotError, ShapeError
from models.gaot_net import GAOT, SampleGraph, step

from .pde_data import DatasetFile, TrajectorySample
from .trainer import ScheduleConfig, Trainer

logger = logging.getLogger(__name__)

REL_FLOOR = 1e-12
HORIZON_TOL = 1e-9


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def relative_l1(pred, truth) -> np.ndarray:
    """Per channel, mean over points of |truth - pred| / max(|truth|, 1e-12)"""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"relative_l1: prediction {pred.shape} vs truth {truth.shape}")
    if truth.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    return np.mean(np.abs(truth - pred) / np.maximum(np.abs(truth), REL_FLOOR), axis=0)


def lower_median(values: Sequence[float]) -> float:
    """Median; the lower of the two middle values for even counts"""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.size == 0:
        raise GaotError("median of an empty set")
    return float(ordered[(ordered.size - 1) // 2])


def aggregate_error(per_sample: np.ndarray) -> tuple:
    """(per-channel medians, mean of the medians) from an S x m error table"""
    per_sample = np.atleast_2d(np.asarray(per_sample, dtype=np.float64))
    medians = np.array([lower_median(per_sample[:, c]) for c in range(per_sample.shape[1])])
    return medians, float(np.mean(medians))


def normalized_scores(errors: Sequence[float]) -> list:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0 or np.any(errors <= 0):
        raise GaotError("normalized_scores: errors must be positive")
    return list(errors.min() / errors)


def robustness_score(scores: Sequence[float]) -> float:
    """mean * (1 - CV), population standard deviation"""
    scores = np.asarray(scores, dtype=np.float64)
    mean = scores.mean() if scores.size else 0.0
    if mean <= 0:
        raise GaotError("robustness_score: scores must be nonempty with a positive mean")
    return float(mean * (1.0 - scores.std() / mean))


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer_direct(model: GAOT, static, u_t, t: float, tau_target: float, graph: SampleGraph) -> torch.Tensor:
    """One step straight to the target lead time"""
    with torch.no_grad():
        return step(model, static, u_t, t, tau_target, graph)


@dataclass
class Rollout:
    prediction: torch.Tensor
    evaluations: int
    times: list


def infer_autoregressive(model: GAOT, static, u_0, t_0: float, dt: float, t_final: float,
                         graph: SampleGraph) -> Rollout:
    """Repeated fixed-increment steps, each output fed back as the next input"""
    if dt <= 0:
        raise GaotError(f"autoregressive step must be positive, got {dt}")
    ratio = (t_final - t_0) / dt
    n_steps = int(round(ratio))
    if n_steps < 1 or abs(ratio - n_steps) > HORIZON_TOL:
        raise GaotError(f"horizon {t_final - t_0} is not a positive multiple of dt={dt}")
    u = torch.as_tensor(u_0, dtype=ad.DTYPE)
    times = [t_0]
    with torch.no_grad():
        for k in range(n_steps):
            t = t_0 + k * dt
            u = step(model, static, u, t, dt, graph)
            times.append(t + dt)
    logger.debug("AR rollout: %d model evaluations", n_steps)
    return Rollout(u, n_steps, times)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)           # (sample_id, channel, rel_l1)
    medians: np.ndarray = field(default_factory=lambda: np.zeros(0))
    error: float = float("nan")
    samples_per_s: float = 0.0
    ms_per_sample: float = 0.0
    evaluations: int = 0
    baselines: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["sample_id", "channel", "rel_l1"])

    def summary(self) -> str:
        lines = ["[summary]", f"median_rel_l1 = {self.error!r}"]
        lines += [f"median_rel_l1_ch{c} = {float(m)!r}" for c, m in enumerate(self.medians)]
        lines += [f"{name} = {value!r}" for name, value in self.baselines.items()]
        lines += [f"samples_per_s = {self.samples_per_s!r}", f"ms_per_sample = {self.ms_per_sample!r}",
                  f"model_evaluations = {self.evaluations}"]
        lines += [f"{k} = {v}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"

    def write(self, csv_path: str, summary_path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write(self.summary())


def _snapshot_index(sample: TrajectorySample, t: float) -> int:
    hits = np.nonzero(np.abs(sample.times - t) <= HORIZON_TOL)[0]
    if hits.size == 0:
        raise GaotError(f"no snapshot at t={t}; available times {sample.times.tolist()}")
    return int(hits[0])


def predict_sample(model: GAOT, sample: TrajectorySample, graph: SampleGraph, mode: str = "DR",
                   ar_dt: float = 0.0, t0: float = 0.0) -> tuple:
    """(prediction at the final snapshot, model evaluations used)"""
    if mode not in ("DR", "AR"):
        raise GaotError(f"unknown inference mode '{mode}', expected DR or AR")
    if not model.config.time_dependent:
        return infer_direct(model, sample.input_fields, None, 0.0, 0.0, graph), 1
    i0 = _snapshot_index(sample, t0)
    t_final = float(sample.times[-1])
    if mode == "DR":
        return infer_direct(model, sample.input_fields, sample.snapshots[i0], t0, t_final - t0, graph), 1
    if ar_dt <= 0:
        if i0 + 1 >= sample.n_times:
            raise GaotError(f"t0={t0} is the last snapshot; nothing to roll out")
        ar_dt = float(sample.times[i0 + 1] - sample.times[i0])
    rollout = infer_autoregressive(model, sample.input_fields, sample.snapshots[i0], t0, ar_dt, t_final, graph)
    return rollout.prediction, rollout.evaluations


def evaluate(model: GAOT, dataset: DatasetFile, split: str = "test", mode: str = "DR", ar_dt: float = 0.0,
             t0: float = 0.0, search=None, samples: Optional[Sequence[TrajectorySample]] = None) -> EvalReport:
    """Relative L1 at the final snapshot of every sample in a split (or of ``samples``)"""
    if mode not in ("DR", "AR"):
        raise GaotError(f"unknown inference mode '{mode}', expected DR or AR")
    model.eval()
    cfg = model.config
    if samples is None:
        # dataset indices seed the latent sampling, as in training
        ids = [int(i) for i in dataset.split_indices(split)]
        samples = [dataset.samples[i] for i in ids]
    else:
        samples = list(samples)
        ids = list(range(len(samples)))
    if not samples:
        raise GaotError(f"split '{split}' is empty")
    report = EvalReport(config={"split": split, "mode": mode if cfg.time_dependent else "direct"})
    errors, baseline = [], []
    train_mean = None
    if not cfg.time_dependent and dataset.train.size:
        train_mean = np.mean(np.concatenate([s.snapshots[0] for s in dataset.split("train")]), axis=0)

    elapsed = 0.0
    for sid, s in zip(ids, samples):
        graph = model.build_graph(s.points, search=search, rng_seed=sid)
        truth = s.snapshots[-1]
        start = time.perf_counter()
        pred, used = predict_sample(model, s, graph, mode, ar_dt, t0)
        elapsed += time.perf_counter() - start
        report.evaluations += used
        if cfg.time_dependent:
            baseline.append(relative_l1(s.snapshots[_snapshot_index(s, t0)], truth))
        err = relative_l1(pred.numpy(), truth)
        errors.append(err)
        report.rows.extend((sid, c, float(e)) for c, e in enumerate(err))
        if train_mean is not None:
            baseline.append(relative_l1(np.broadcast_to(train_mean, truth.shape), truth))

    report.medians, report.error = aggregate_error(np.stack(errors))
    if baseline:
        name = "persistence_rel_l1" if cfg.time_dependent else "mean_predictor_rel_l1"
        report.baselines[name] = aggregate_error(np.stack(baseline))[1]
    report.samples_per_s = len(samples) / elapsed if elapsed > 0 else float("inf")
    report.ms_per_sample = 1000.0 * elapsed / len(samples)
    logger.info("📋 %s split: median relative L1 %.4f over %d samples (%d model evaluations)",
                split, report.error, len(samples), report.evaluations)
    return report


# ---------------------------------------------------------------------------
# Benchmarking
# ---------------------------------------------------------------------------

@dataclass
class BenchStats:
    mode: str
    points: int
    samples_per_s: float
    ms_per_sample: float
    repeats: int


def bench(model: GAOT, dataset: DatasetFile, mode: str = "infer", warmup: int = 10, repeats: int = 100,
          batch: int = 1, search=None) -> BenchStats:
    """Throughput (train: forward + backward + update) or latency (infer), averaged over ``repeats``.

    Graphs are built before timing starts; training runs on a copy of the model.
    """
    if mode not in ("train", "infer"):
        raise GaotError(f"unknown bench mode '{mode}', expected train or infer")
    points = dataset.samples[0].n_points
    if mode == "infer":
        model.eval()
        s = dataset.samples[0]
        graph = model.build_graph(s.points, search=search)
        u_t = s.snapshots[0] if model.config.time_dependent else None
        tau = float(s.times[-1] - s.times[0]) if model.config.time_dependent else 0.0

        def run():
            infer_direct(model, s.input_fields, u_t, 0.0, tau, graph)
        per_call = 1
    else:
        work = copy.deepcopy(model)
        trainer = Trainer(work, dataset, ScheduleConfig(max(repeats + warmup, 1)), batch=batch, search=search)
        if not work.is_normalized:
            trainer.prepare()
        examples = trainer.examples("train")[:batch] or trainer.examples("test")[:batch]
        if not examples:
            raise GaotError("bench: no examples to train on")
        for ex in examples:
            trainer.graph(ex.sample)
        work.train()

        def run():
            trainer.optimizer.zero_grad(set_to_none=True)
            loss = trainer.batch_loss(examples)
            ad.backward(loss)
            trainer.optimizer.step()
        per_call = len(examples)

    for _ in range(warmup):
        run()
    start = time.perf_counter()
    for _ in range(repeats):
        run()
    total = time.perf_counter() - start
    samples = per_call * repeats
    stats = BenchStats(mode, points, samples / total if total > 0 else float("inf"),
                       1000.0 * total / samples, repeats)
    logger.info("⏱️ bench %s @ %d points: %.2f samples/s, %.3f ms/sample",
                mode, points, stats.samples_per_s, stats.ms_per_sample)
    return stats


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_history(history: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(history["epoch"], history["loss"], label="Training Loss")
    if "val_loss" in history:
        ax.semilogy(history["epoch"], history["val_loss"], label="Validation Loss")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.set_title("Training Loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_resolution(points: Sequence[int], errors: Sequence[float], path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(points, errors, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("Points per sample")
    ax.set_ylabel("Median relative L1")
    ax.set_title("Error vs resolution")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_ablation(grid: pd.DataFrame, path: str) -> str:
    """Heatmap of test error, rows = scales x embedding, columns = stepping"""
    table = grid.assign(variant=grid["scales"] + " / " + grid["embedding"]).pivot_table(
        index="variant", columns="stepping", values="rel_l1", aggfunc="mean")
    fig, ax = plt.subplots(figsize=(7, 5))
    sns.heatmap(table, annot=True, fmt=".3f", cmap="Blues", ax=ax)
    ax.set_title("Ablation: median relative L1")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
