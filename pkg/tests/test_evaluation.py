import configparser

import numpy as np
import pandas as pd
import pytest
import torch

from app.evaluation import (aggregate_error, bench, evaluate, infer_autoregressive, infer_direct, lower_median,
                            normalized_scores, plot_ablation, plot_history, plot_resolution, predict_sample,
                            relative_l1, robustness_score)
from app.trainer import Trainer, ScheduleConfig
from app.model_loader import build_model
from models.errors import GaotError, ShapeError
from tests.conftest import fitted_model, random_sample, tiny_config


class TestMetrics:
    def test_relative_l1_example(self):
        assert relative_l1(np.array([0.0, 2.0]), np.array([1.0, 2.0])).tolist() == [0.5]

    def test_zero_truth_uses_floor(self):
        np.testing.assert_allclose(relative_l1(np.array([1e-12, 2.0]), np.array([0.0, 2.0])), [0.5])

    def test_relative_l1_per_channel(self):
        truth = np.array([[1.0, 10.0], [2.0, 10.0]])
        pred = np.array([[1.5, 10.0], [2.0, 5.0]])
        np.testing.assert_allclose(relative_l1(pred, truth), [0.25, 0.25])

    def test_relative_l1_invariances(self, rng):
        truth = rng.normal(size=(30, 2))
        pred = truth + 0.1 * rng.normal(size=(30, 2))
        base = relative_l1(pred, truth)
        np.testing.assert_allclose(relative_l1(3.5 * pred, 3.5 * truth), base, rtol=1e-12)
        perm = rng.permutation(30)
        np.testing.assert_allclose(relative_l1(pred[perm], truth[perm]), base, rtol=1e-12)
        np.testing.assert_array_equal(relative_l1(truth, truth), [0.0, 0.0])

    def test_relative_l1_shape_mismatch(self):
        with pytest.raises(ShapeError):
            relative_l1(np.zeros((3, 1)), np.zeros((3, 2)))

    def test_lower_median(self):
        assert lower_median([3.0, 1.0, 2.0]) == 2.0
        assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
        with pytest.raises(GaotError):
            lower_median([])

    def test_aggregate_error(self):
        medians, error = aggregate_error(np.array([[0.1, 0.4], [0.3, 0.2], [0.2, 0.6]]))
        np.testing.assert_allclose(medians, [0.2, 0.4])
        assert error == pytest.approx(0.3)

    def test_normalized_scores(self):
        assert normalized_scores([2.0, 4.0]) == [1.0, 0.5]
        with pytest.raises(GaotError):
            normalized_scores([1.0, 0.0])

    def test_robustness_score(self):
        assert robustness_score([1.0, 0.5]) == pytest.approx(0.5)
        assert robustness_score([1.0, 1.0, 1.0, 0.0]) == pytest.approx(0.75 - 0.1875 ** 0.5)
        assert robustness_score([0.8, 0.8]) == pytest.approx(0.8)


@pytest.fixture
def trajectory_model(rng):
    """Derivative-stepping model on trajectories with snapshots every 2 time units up to 14"""
    times = np.arange(0.0, 16.0, 2.0)
    samples = [random_sample(rng, 20, times=times) for _ in range(2)]
    model = fitted_model(tiny_config(time_dependent=True, stepping="derivative"), samples)
    return model, samples[0], model.build_graph(samples[0].points)


class TestInference:
    def test_autoregressive_counts_evaluations(self, trajectory_model):
        model, s, graph = trajectory_model
        rollout = infer_autoregressive(model, s.input_fields, s.snapshots[0], 0.0, 2.0, 14.0, graph)
        assert rollout.evaluations == 7
        assert rollout.times == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]
        assert rollout.prediction.shape == (20, 1)
        _, used = predict_sample(model, s, graph, "AR", ar_dt=2.0)
        assert used == 7

    def test_autoregressive_defaults_to_snapshot_spacing(self, trajectory_model):
        model, s, graph = trajectory_model
        pred, used = predict_sample(model, s, graph, "AR", t0=4.0)
        assert used == 5
        expected = infer_autoregressive(model, s.input_fields, s.snapshots[2], 4.0, 2.0, 14.0, graph)
        assert torch.equal(pred, expected.prediction)

    def test_single_step_rollout_equals_direct(self, trajectory_model):
        model, s, graph = trajectory_model
        direct = infer_direct(model, s.input_fields, s.snapshots[0], 0.0, 14.0, graph)
        rollout = infer_autoregressive(model, s.input_fields, s.snapshots[0], 0.0, 14.0, 14.0, graph)
        assert rollout.evaluations == 1
        assert torch.equal(direct, rollout.prediction)
        pred, used = predict_sample(model, s, graph, "DR")
        assert used == 1 and torch.equal(pred, direct)

    @pytest.mark.parametrize("dt", [3.0, 0.0, -2.0, 20.0])
    def test_bad_horizon(self, trajectory_model, dt):
        model, s, graph = trajectory_model
        with pytest.raises(GaotError):
            infer_autoregressive(model, s.input_fields, s.snapshots[0], 0.0, dt, 14.0, graph)

    def test_rollout_from_last_snapshot(self, trajectory_model):
        model, s, graph = trajectory_model
        with pytest.raises(GaotError, match="last snapshot"):
            predict_sample(model, s, graph, "AR", t0=14.0)

    def test_unknown_start_time_and_mode(self, trajectory_model):
        model, s, graph = trajectory_model
        with pytest.raises(GaotError, match="no snapshot"):
            predict_sample(model, s, graph, "DR", t0=1.0)
        with pytest.raises(GaotError):
            predict_sample(model, s, graph, "XR")


def prepared(dataset, **overrides):
    config = tiny_config(time_dependent=dataset.time_dependent, **overrides)
    model = build_model(config, 0)
    Trainer(model, dataset, ScheduleConfig(1)).prepare()
    return model


class TestEvaluate:
    def test_time_independent_report(self, poisson_dataset, tmp_path):
        model = prepared(poisson_dataset)
        report = evaluate(model, poisson_dataset, "test")
        assert len(report.rows) == poisson_dataset.test.size
        assert report.evaluations == poisson_dataset.test.size
        assert np.isfinite(report.error) and report.error == report.medians[0]
        assert "mean_predictor_rel_l1" in report.baselines
        report.write(str(tmp_path / "eval.csv"), str(tmp_path / "summary.txt"))
        frame = pd.read_csv(tmp_path / "eval.csv")
        assert list(frame.columns) == ["sample_id", "channel", "rel_l1"]
        parser = configparser.ConfigParser()
        parser.read(tmp_path / "summary.txt")
        assert float(parser["summary"]["median_rel_l1"]) == report.error
        assert parser["summary"]["mode"] == "direct"

    def test_time_dependent_report(self, diffusion_dataset):
        model = prepared(diffusion_dataset, stepping="derivative")
        report = evaluate(model, diffusion_dataset, "test", mode="AR")
        assert report.evaluations == 2 * diffusion_dataset.test.size
        assert "persistence_rel_l1" in report.baselines
        assert report.config == {"split": "test", "mode": "AR"}

    def test_deterministic(self, poisson_dataset):
        model = prepared(poisson_dataset)
        a = evaluate(model, poisson_dataset, "test")
        b = evaluate(model, poisson_dataset, "test")
        assert a.rows == b.rows

    def test_downsampled_latents_seeded_by_dataset_index(self, poisson_dataset, monkeypatch):
        model = build_model(tiny_config(strategy="II", n_latent=12), 0)
        trainer = Trainer(model, poisson_dataset, ScheduleConfig(1))
        trainer.prepare()
        seen = {}
        build = model.build_graph

        def recording(points, **kw):
            graph = build(points, **kw)
            seen[kw["rng_seed"]] = graph.latent_coords
            return graph

        monkeypatch.setattr(model, "build_graph", recording)
        report = evaluate(model, poisson_dataset, "test")
        test_ids = [int(i) for i in poisson_dataset.test]
        assert sorted(seen) == sorted(test_ids)
        assert [row[0] for row in report.rows] == test_ids
        for i in test_ids:
            np.testing.assert_array_equal(seen[i], trainer.graph(i).latent_coords)

    def test_empty_split(self, poisson_dataset):
        with pytest.raises(GaotError, match="empty"):
            evaluate(prepared(poisson_dataset), poisson_dataset, "val")


class TestBench:
    def test_infer(self, poisson_dataset):
        stats = bench(prepared(poisson_dataset), poisson_dataset, "infer", warmup=1, repeats=2)
        assert stats.points == 64 and stats.repeats == 2
        assert stats.samples_per_s > 0 and np.isfinite(stats.ms_per_sample)

    def test_train_leaves_model_untouched(self, poisson_dataset):
        model = prepared(poisson_dataset)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        stats = bench(model, poisson_dataset, "train", warmup=1, repeats=2, batch=2)
        assert stats.mode == "train" and stats.ms_per_sample > 0
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_unknown_mode(self, poisson_dataset):
        with pytest.raises(GaotError):
            bench(prepared(poisson_dataset), poisson_dataset, "serve")


class TestPlots:
    def test_svg_outputs(self, tmp_path):
        history = pd.DataFrame(dict(epoch=[0, 1, 2], loss=[1.0, 0.5, 0.25], val_loss=[1.1, 0.6, 0.4]))
        grid = pd.DataFrame(dict(scales=["single", "multi"] * 2, embedding=["none"] * 2 + ["statistical"] * 2,
                                 stepping=["output"] * 4, rel_l1=[0.3, 0.2, 0.25, 0.1]))
        paths = [plot_history(history, str(tmp_path / "loss.svg")),
                 plot_resolution([256, 512, 1024], [0.3, 0.2, 0.15], str(tmp_path / "res.svg")),
                 plot_ablation(grid, str(tmp_path / "ablation.svg"))]
        for path in paths:
            with open(path, encoding="utf-8") as f:
                assert "<svg" in f.read()
