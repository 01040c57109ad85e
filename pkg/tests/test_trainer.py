import os

import numpy as np
import pytest
import torch

from app.model_loader import build_model
from app.pde_data import generate_dataset
from app.trainer import (ScheduleConfig, Trainer, TrainingHistory, WarmupCosineScheduler, lr_at, make_optimizer,
                         mse_loss, optimizer_step, train)
from models.errors import ConfigError, GaotError, NonFiniteError, TrainingDivergedError
from tests.conftest import tiny_config


def make_trainer(dataset, seed=0, **kw):
    config = tiny_config(time_dependent=dataset.time_dependent,
                         stepping="derivative" if dataset.time_dependent else "output")
    return Trainer(build_model(config, 1), dataset, ScheduleConfig(kw.pop("epochs", 4)), seed=seed, **kw)


class TestSchedule:
    def test_endpoints_at_200_epochs(self):
        cfg = ScheduleConfig(200)
        assert lr_at(0, cfg) == pytest.approx(8e-4, abs=1e-12)
        assert lr_at(cfg.warmup_end, cfg) == pytest.approx(1e-3, abs=1e-12)
        assert lr_at(cfg.cosine_end, cfg) == pytest.approx(1e-4, abs=1e-12)
        assert lr_at(199, cfg) == pytest.approx(5e-5, abs=1e-12)

    def test_warmup_is_linear_and_cosine_decreases(self):
        cfg = ScheduleConfig(200)
        assert lr_at(10, cfg) == pytest.approx(9e-4, abs=1e-12)
        cosine = [lr_at(e, cfg) for e in range(20, 190)]
        assert all(b < a for a, b in zip(cosine, cosine[1:]))

    def test_cosine_midpoint(self):
        cfg = ScheduleConfig(200)
        midpoint = (cfg.warmup_end + cfg.cosine_end) / 2
        assert lr_at(midpoint, cfg) == pytest.approx(5.5e-4, abs=1e-12)

    def test_out_of_range(self):
        cfg = ScheduleConfig(10)
        with pytest.raises(GaotError):
            lr_at(10, cfg)
        with pytest.raises(GaotError):
            lr_at(-1, cfg)

    @pytest.mark.parametrize("kw", [dict(total_epochs=-1), dict(warmup_frac=0.5, cosine_frac=0.6),
                                    dict(lr_peak=0.0)])
    def test_invalid_schedule(self, kw):
        with pytest.raises(ConfigError):
            ScheduleConfig(**{"total_epochs": 10, **kw})

    def test_scheduler_follows_lr_at(self):
        cfg = ScheduleConfig(10)
        model = build_model(tiny_config(), 0)
        optimizer = make_optimizer(model)
        scheduler = WarmupCosineScheduler(optimizer, cfg)
        for epoch in range(10):
            assert optimizer.param_groups[0]["lr"] == pytest.approx(lr_at(epoch, cfg), rel=1e-14)
            scheduler.step()


class TestLoss:
    def test_mse_value(self):
        outputs = [torch.tensor([[1.0], [3.0]], dtype=torch.float64), torch.tensor([[2.0, 0.0]], dtype=torch.float64)]
        targets = [torch.zeros(2, 1, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64)]
        assert float(mse_loss(outputs, targets)) == 4.5

    def test_batch_order_does_not_matter(self, poisson_dataset):
        trainer = make_trainer(poisson_dataset)
        trainer.prepare()
        examples = trainer.examples()
        a = trainer.batch_loss(examples)
        b = trainer.batch_loss(examples[::-1])
        assert torch.equal(a, b)

    def test_time_dependent_examples_are_all_pairs(self, diffusion_dataset):
        trainer = make_trainer(diffusion_dataset)
        assert len(trainer.examples()) == 3 * diffusion_dataset.train.size
        trainer.prepare()
        item, target = trainer.model_input(trainer.examples()[0])
        assert item.state.shape == (48, 2) and target.shape == (48, 1)

    def test_non_finite_gradient_rejected(self):
        model = build_model(tiny_config(), 0)
        optimizer = make_optimizer(model)
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        name, param = next(iter(model.named_parameters()))
        param.grad.view(-1)[0] = float("nan")
        with pytest.raises(NonFiniteError, match=name):
            optimizer_step(optimizer, model.named_parameters())


class TestOptimizer:
    @staticmethod
    def scalar_parameter(value):
        layer = torch.nn.Linear(1, 1, bias=False).double()
        with torch.no_grad():
            layer.weight.fill_(value)
        return layer

    def test_first_step_closed_form(self):
        layer = self.scalar_parameter(0.0)
        optimizer = make_optimizer(layer)
        layer.weight.grad = torch.ones_like(layer.weight)
        optimizer_step(optimizer, layer.named_parameters(), lr=1e-3)
        # bias-corrected m / sqrt(v) is 1 after one step
        assert layer.weight.item() == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_gradient_without_decay_keeps_parameters(self):
        layer = self.scalar_parameter(0.7)
        optimizer = make_optimizer(layer, weight_decay=0.0)
        for _ in range(3):
            layer.weight.grad = torch.zeros_like(layer.weight)
            optimizer_step(optimizer, layer.named_parameters(), lr=1e-3)
        assert layer.weight.item() == 0.7

    def test_identical_seeds_give_identical_parameter_trajectories(self, poisson_dataset):
        trajectories = []
        for _ in range(2):
            trainer = make_trainer(poisson_dataset, seed=3, batch=2, epochs=3)
            trainer.prepare()
            states = []
            for epoch in range(3):
                trainer.run_epoch(epoch)
                trainer.scheduler.step()
                states.append(torch.cat([p.detach().reshape(-1).clone() for p in trainer.model.parameters()]))
            trajectories.append(states)
        for a, b in zip(*trajectories):
            assert torch.equal(a, b)


class TestTrainer:
    def test_mismatched_channels(self, poisson_dataset):
        with pytest.raises(ConfigError):
            Trainer(build_model(tiny_config(in_channels=2), 0), poisson_dataset, ScheduleConfig(1))

    def test_empty_training_split(self):
        dataset = generate_dataset("poisson_gauss", 2, 64, seed=0, n_test=1)
        dataset.train = np.zeros(0, dtype=np.int64)
        with pytest.raises(GaotError):
            make_trainer(dataset).prepare()

    def test_identical_seeds_give_identical_curves(self, poisson_dataset):
        histories = []
        for _ in range(2):
            trainer = make_trainer(poisson_dataset, seed=3, batch=2, epochs=3)
            trainer.prepare()
            histories.append(trainer.fit().losses)
        assert histories[0] == histories[1]

    def test_loss_decreases(self, poisson_dataset):
        schedule = ScheduleConfig(20, lr_start=5e-3, lr_peak=5e-3, lr_cos_end=1e-3, lr_final=1e-3)
        model, history = train(build_model(tiny_config(), 2), poisson_dataset, schedule, batch=1)
        assert min(history.losses[-3:]) < history.losses[0]
        assert np.all(np.isfinite(history.losses))

    def test_history_and_checkpoints(self, tmp_path):
        dataset = generate_dataset("poisson_gauss", 5, 64, seed=1, n_val=1, n_test=1)
        trainer = make_trainer(dataset, batch=2, epochs=2, checkpoint_dir=str(tmp_path / "ck"), checkpoint_every=1)
        trainer.prepare()
        history = trainer.fit()
        frame = history.to_frame()
        assert list(frame.columns) == ["epoch", "loss", "lr", "seconds", "val_loss"]
        assert frame["epoch"].tolist() == [0, 1]
        assert sorted(os.listdir(tmp_path / "ck")) == ["epoch_0001.gck", "epoch_0002.gck", "final.gck"]
        assert trainer.last_checkpoint.endswith("final.gck")
        history.write_csv(str(tmp_path / "metrics.csv"))
        assert (tmp_path / "metrics.csv").read_text().startswith("epoch,loss,lr,seconds,val_loss")

    def test_diverged_loss_stops_training(self, poisson_dataset, monkeypatch):
        trainer = make_trainer(poisson_dataset)
        trainer.prepare()
        monkeypatch.setattr(trainer, "batch_loss",
                            lambda *a, **k: torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True))
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            trainer.fit(1)

    def test_edge_masking_changes_training_graphs_only(self, poisson_dataset):
        trainer = Trainer(build_model(tiny_config(em=0.5), 0), poisson_dataset, ScheduleConfig(1))
        trainer.prepare()
        examples = trainer.examples()[:2]
        clean = trainer.batch_loss(examples)
        assert torch.equal(clean, trainer.batch_loss(examples))
        assert not torch.equal(clean, trainer.batch_loss(examples, epoch=0))


class TestHistory:
    def test_columns_without_validation(self):
        history = TrainingHistory()
        history.append(epoch=0, loss=1.0, lr=1e-3, seconds=0.1)
        assert list(history.to_frame().columns) == ["epoch", "loss", "lr", "seconds"]
        assert history.losses == [1.0]
