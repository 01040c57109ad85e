import numpy as np
import pytest

from models.errors import GaotError
from models.stepping import all2all_pairs, fit_normalization, stepping_coefficients, stepping_target
from tests.conftest import random_sample


class TestPairs:
    def test_eight_snapshots_give_28_pairs(self):
        pairs = all2all_pairs(np.linspace(0, 1, 8))
        assert len(pairs) == 28
        assert pairs[0] == (0, 1) and pairs[-1] == (6, 7)
        assert pairs == sorted(pairs)

    def test_single_snapshot_has_no_pairs(self):
        assert all2all_pairs([0.0]) == []

    def test_times_must_ascend(self):
        with pytest.raises(GaotError):
            all2all_pairs([0.0, 1.0, 1.0])


class TestStepping:
    @pytest.mark.parametrize("mode, tau, expected", [
        ("output", 0.3, (0.0, 1.0)),
        ("residual", 0.3, (1.0, 1.0)),
        ("derivative", 0.3, (1.0, 0.3)),
        ("derivative", 0.0, (1.0, 0.0)),
    ])
    def test_coefficients(self, mode, tau, expected):
        assert stepping_coefficients(mode, tau) == expected

    def test_targets(self):
        a, b = np.array([[1.0], [2.0]]), np.array([[3.0], [6.0]])
        np.testing.assert_array_equal(stepping_target("output", a, b, 2.0), b)
        np.testing.assert_array_equal(stepping_target("residual", a, b, 2.0), [[2.0], [4.0]])
        np.testing.assert_array_equal(stepping_target("derivative", a, b, 2.0), [[1.0], [2.0]])

    def test_unknown_mode(self):
        with pytest.raises(GaotError):
            stepping_coefficients("euler", 1.0)

    def test_derivative_needs_positive_lead(self):
        with pytest.raises(GaotError):
            stepping_target("derivative", np.zeros(1), np.ones(1), 0.0)


class TestNormalization:
    def test_time_independent_moments(self, rng):
        samples = [random_sample(rng, 30) for _ in range(4)]
        stats = fit_normalization(samples, "output", False)
        inputs = np.concatenate([s.input_fields for s in samples])
        targets = np.concatenate([s.snapshots[0] for s in samples])
        np.testing.assert_allclose(stats.input_mean, inputs.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(stats.target_std, targets.std(axis=0), rtol=1e-12)
        assert stats.time_scale == 1.0

    def test_time_dependent_targets_follow_stepping(self, rng):
        samples = [random_sample(rng, 20, times=(0.0, 0.5, 2.0)) for _ in range(3)]
        stats = fit_normalization(samples, "derivative", True)
        targets = np.concatenate([(s.snapshots[j] - s.snapshots[i]) / (s.times[j] - s.times[i])
                                  for s in samples for i, j in all2all_pairs(s.times)])
        inputs = np.concatenate([np.concatenate([s.input_fields, s.snapshots[n]], axis=1)
                                 for s in samples for n in range(3)])
        np.testing.assert_allclose(stats.target_mean, targets.mean(axis=0), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(stats.input_std, inputs.std(axis=0), rtol=1e-10)
        assert stats.input_mean.shape == (2,)
        assert stats.time_scale == 2.0

    def test_constant_channel_std_is_floored(self, rng):
        samples = [random_sample(rng, 10) for _ in range(2)]
        for s in samples:
            s.input_fields[:] = 3.0
        stats = fit_normalization(samples, "output", False)
        assert stats.input_std[0] == 1e-8

    def test_empty_training_set(self):
        with pytest.raises(GaotError):
            fit_normalization([], "output", False)
