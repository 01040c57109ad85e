# app/trainer.py - Optimization loop for GAOT
"""
MSE in normalized target space, AdamW with decoupled weight decay, and a
warmup / cosine / constant learning-rate schedule:

    [0, w)      linear lr_start -> lr_peak           (w = warmup_frac * E)
    [w, c]      cosine lr_peak -> lr_cos_end         (c = (warmup_frac + cosine_frac) * E)
    (c, E)      lr_final
"""
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from config import derive_seed
from models import autodiff as ad
from models.errors import ConfigError, GaotError, NonFiniteError, TrainingDivergedError
from models.gaot_net import GAOT, ModelInput, SampleGraph
from models.stepping import all2all_pairs, fit_normalization, stepping_target

from .model_loader import save_checkpoint
from .pde_data import DatasetFile

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class ScheduleConfig:
    total_epochs: int
    warmup_frac: float = 0.10
    cosine_frac: float = 0.85
    lr_start: float = 8e-4
    lr_peak: float = 1e-3
    lr_cos_end: float = 1e-4
    lr_final: float = 5e-5

    def __post_init__(self):
        if self.total_epochs < 0:
            raise ConfigError(f"[train] epochs must be >= 0, got {self.total_epochs}")
        if self.warmup_frac < 0 or self.cosine_frac < 0 or self.warmup_frac + self.cosine_frac > 1.0:
            raise ConfigError("[train] warmup_frac + cosine_frac must lie in [0, 1]")
        if min(self.lr_start, self.lr_peak, self.lr_cos_end, self.lr_final) <= 0:
            raise ConfigError("[train] learning rates must be positive")

    @property
    def warmup_end(self) -> float:
        return self.warmup_frac * self.total_epochs

    @property
    def cosine_end(self) -> float:
        return (self.warmup_frac + self.cosine_frac) * self.total_epochs


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise GaotError(f"lr_at: epoch {epoch} outside [0, {cfg.total_epochs})")
    w, c = cfg.warmup_end, cfg.cosine_end
    if epoch < w:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / w
    if epoch <= c:
        progress = (epoch - w) / (c - w) if c > w else 1.0
        return cfg.lr_cos_end + (cfg.lr_peak - cfg.lr_cos_end) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.lr_final


class WarmupCosineScheduler(torch.optim.lr_scheduler.LambdaLR):
    """Sets each group's lr to lr_at(epoch); the optimizer's base lr must be 1"""

    def __init__(self, optimizer: torch.optim.Optimizer, schedule: ScheduleConfig, last_epoch: int = -1):
        self.schedule = schedule
        super().__init__(optimizer=optimizer, lr_lambda=self.scale_lr, last_epoch=last_epoch)

    def scale_lr(self, epoch: int) -> float:
        if self.schedule.total_epochs == 0:
            return self.schedule.lr_start
        return lr_at(min(epoch, self.schedule.total_epochs - 1), self.schedule)


def make_optimizer(model: torch.nn.Module, weight_decay: float = 1e-5) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=1.0, betas=ADAM_BETAS, eps=ADAM_EPS,
                             weight_decay=weight_decay, foreach=False)


def optimizer_step(optimizer: torch.optim.Optimizer, named_parameters: Iterable, lr: Optional[float] = None) -> None:
    """One AdamW update after checking every populated gradient is finite"""
    for name, p in named_parameters:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()


def mse_loss(outputs: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]) -> torch.Tensor:
    """(1 / N_s) sum_s (1 / N_p) sum_p ||out - target||^2"""
    losses = []
    for out, target in zip(outputs, targets):
        diff = ad.sub(out, target)
        losses.append(ad.mean(ad.sum_(ad.mul(diff, diff), axis=1)))
    return ad.mean(torch.stack(losses))


@dataclass
class Example:
    sample: int
    src: int
    dst: int

    @property
    def key(self) -> tuple:
        return (self.sample, self.src, self.dst)


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "loss", "lr", "seconds"]
        if any("val_loss" in r for r in self.rows):
            columns.append("val_loss")
        return pd.DataFrame(self.rows, columns=columns)

    def write_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.rows]


class Trainer:
    def __init__(self, model: GAOT, dataset: DatasetFile, schedule: ScheduleConfig, batch: int = 8,
                 seed: int = 0, weight_decay: float = 1e-5, search=None, checkpoint_dir: str = "",
                 checkpoint_every: int = 0, log_every: int = 10, profile: str = "desk"):
        if batch < 1:
            raise ConfigError(f"[train] batch must be >= 1, got {batch}")
        if dataset.time_dependent != model.config.time_dependent:
            raise ConfigError("[model] time_dependent does not match the dataset")
        if (dataset.in_channels, dataset.out_channels) != (model.config.in_channels, model.config.out_channels):
            raise ConfigError(f"[model] channels ({model.config.in_channels}, {model.config.out_channels}) do not "
                              f"match the dataset ({dataset.in_channels}, {dataset.out_channels})")
        self.model = model
        self.dataset = dataset
        self.schedule = schedule
        self.batch = batch
        self.seed = seed
        self.search = search
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every
        self.log_every = max(1, log_every)
        self.profile = profile
        self.optimizer = make_optimizer(model, weight_decay)
        self.scheduler = WarmupCosineScheduler(self.optimizer, schedule)
        self.graphs: dict = {}
        self.last_checkpoint: Optional[str] = None

    # -- preparation --------------------------------------------------------

    def graph(self, index: int) -> SampleGraph:
        if index not in self.graphs:
            s = self.dataset.samples[index]
            self.graphs[index] = self.model.build_graph(s.points, search=self.search, rng_seed=index)
        return self.graphs[index]

    def prepare(self) -> None:
        """Build training graphs, then fit geometry normalizers and Z-score statistics on the train split"""
        train = self.dataset.train
        if train.size == 0:
            raise GaotError("training split is empty")
        graphs = [self.graph(int(i)) for i in train]
        self.model.fit_geometry(graphs)
        cfg = self.model.config
        stats = fit_normalization(self.dataset.split("train"), cfg.effective_stepping, cfg.time_dependent)
        self.model.set_normalization(stats)
        logger.info("📊 Prepared %d training graphs", len(graphs))

    def examples(self, split: str = "train") -> list:
        out = []
        for i in self.dataset.split_indices(split):
            s = self.dataset.samples[int(i)]
            if self.model.config.time_dependent:
                out.extend(Example(int(i), a, b) for a, b in all2all_pairs(s.times))
            else:
                out.append(Example(int(i), 0, 0))
        return out

    def model_input(self, ex: Example, graph: Optional[SampleGraph] = None):
        """(ModelInput, normalized target) of one example"""
        s = self.dataset.samples[ex.sample]
        cfg = self.model.config
        graph = graph or self.graph(ex.sample)
        if cfg.time_dependent:
            state = np.concatenate([s.input_fields, s.snapshots[ex.src]], axis=1)
            t, tau = float(s.times[ex.src]), float(s.times[ex.dst] - s.times[ex.src])
            target = stepping_target(cfg.effective_stepping, s.snapshots[ex.src], s.snapshots[ex.dst], tau)
        else:
            state, t, tau, target = s.input_fields, 0.0, 0.0, s.snapshots[0]
        target = self.model.normalize_target(torch.as_tensor(target, dtype=ad.DTYPE))
        return ModelInput(torch.as_tensor(state, dtype=ad.DTYPE), t, tau, graph, ex.key), target

    # -- loss ---------------------------------------------------------------

    def batch_loss(self, batch: Sequence[Example], epoch: Optional[int] = None,
                   rng: Optional[torch.Generator] = None) -> torch.Tensor:
        """Mean over samples of the per-point mean squared error norm.

        Items are put in key order first, so the result (and its gradient)
        does not depend on the order of ``batch``.
        """
        batch = sorted(batch, key=lambda e: e.key)
        em = self.model.config.em
        inputs, targets = [], []
        for ex in batch:
            graph = self.graph(ex.sample)
            if epoch is not None and em > 0:
                graph = graph.with_dropped_edges(em, derive_seed(self.seed, f"edges:{epoch}:{ex.sample}"))
            item, target = self.model_input(ex, graph)
            inputs.append(item)
            targets.append(target)
        return mse_loss(self.model.forward_batch(inputs, rng), targets)

    def evaluate_loss(self, split: str = "train") -> float:
        examples = self.examples(split)
        if not examples:
            return float("nan")
        was_training = self.model.training
        self.model.eval()
        total = 0.0
        with torch.no_grad():
            for start in range(0, len(examples), self.batch):
                chunk = examples[start:start + self.batch]
                total += float(self.batch_loss(chunk)) * len(chunk)
        self.model.train(was_training)
        return total / len(examples)

    # -- loop ---------------------------------------------------------------

    def _save(self, name: str) -> Optional[str]:
        if not self.checkpoint_dir:
            return None
        self.last_checkpoint = save_checkpoint(self.model, os.path.join(self.checkpoint_dir, name), self.profile)
        return self.last_checkpoint

    def run_epoch(self, epoch: int) -> float:
        self.model.train()
        examples = self.examples("train")
        order = np.random.default_rng(derive_seed(self.seed, f"shuffle:{epoch}")).permutation(len(examples))
        rng = torch.Generator().manual_seed(derive_seed(self.seed, f"dropout:{epoch}"))
        total = 0.0
        for start in range(0, len(order), self.batch):
            batch = [examples[k] for k in order[start:start + self.batch]]
            self.optimizer.zero_grad(set_to_none=True)
            loss = self.batch_loss(batch, epoch, rng)
            if not torch.isfinite(loss):
                kept = f"; last good checkpoint {self.last_checkpoint}" if self.last_checkpoint else ""
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}{kept}")
            ad.backward(loss)
            optimizer_step(self.optimizer, self.model.named_parameters())
            total += float(loss.detach()) * len(batch)
        return total / max(len(examples), 1)

    def fit(self, epochs: Optional[int] = None) -> TrainingHistory:
        epochs = self.schedule.total_epochs if epochs is None else epochs
        history = TrainingHistory()
        has_val = self.dataset.val.size > 0
        logger.info("🚀 Training GAOT for %d epochs on %d examples", epochs, len(self.examples("train")))
        for epoch in range(epochs):
            lr = self.optimizer.param_groups[0]["lr"]
            start = time.perf_counter()
            loss = self.run_epoch(epoch)
            seconds = time.perf_counter() - start
            row = dict(epoch=epoch, loss=loss, lr=lr, seconds=seconds)
            if has_val:
                row["val_loss"] = self.evaluate_loss("val")
            history.append(**row)
            self.scheduler.step()
            if (epoch + 1) % self.log_every == 0 or epoch == epochs - 1:
                logger.info("Epoch [%d/%d], Loss: %.6f, LR: %.2e", epoch + 1, epochs, loss, lr)
            if self.checkpoint_every and (epoch + 1) % self.checkpoint_every == 0:
                self._save(f"epoch_{epoch + 1:04d}.gck")
        self._save("final.gck")
        logger.info("✅ Training completed")
        return history


def train(model: GAOT, dataset: DatasetFile, schedule: ScheduleConfig, **options):
    """Prepare statistics, run the schedule, return (model, history)"""
    trainer = Trainer(model, dataset, schedule, **options)
    trainer.prepare()
    history = trainer.fit()
    return model, history
