# models/stepping.py - Time-stepping wrapper and the Z-score statistics it needs
"""
The network emits S^ in normalized target space; the prediction is
``gamma * u(t) + delta * denorm(S^)`` with (gamma, delta) chosen by the
stepping strategy:

    output      (0, 1)    target u(t + tau)
    residual    (1, 1)    target u(t + tau) - u(t)
    derivative  (1, tau)  target (u(t + tau) - u(t)) / tau
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from sklearn.preprocessing import StandardScaler

from .errors import GaotError

logger = logging.getLogger(__name__)

STEPPING_MODES = ("output", "residual", "derivative")
STD_FLOOR = 1e-8


class Trajectory(Protocol):
    points: np.ndarray
    input_fields: np.ndarray
    snapshots: np.ndarray
    times: np.ndarray


@dataclass
class NormStats:
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    time_scale: float = 1.0


def all2all_pairs(times: Sequence[float]) -> list[tuple[int, int]]:
    """Every snapshot pair (i, j) with i < j, in lexicographic order"""
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise GaotError("all2all_pairs: times must be strictly ascending")
    return list(itertools.combinations(range(times.shape[0]), 2))


def stepping_coefficients(stepping: str, tau: float) -> tuple[float, float]:
    if stepping == "output":
        return 0.0, 1.0
    if stepping == "residual":
        return 1.0, 1.0
    if stepping == "derivative":
        return 1.0, float(tau)
    raise GaotError(f"unknown stepping '{stepping}', expected one of {STEPPING_MODES}")


def stepping_target(stepping: str, u_from: np.ndarray, u_to: np.ndarray, tau: float) -> np.ndarray:
    """Physical quantity the network learns for one snapshot pair"""
    if stepping == "output":
        return u_to
    if stepping == "residual":
        return u_to - u_from
    if stepping == "derivative":
        if tau <= 0:
            raise GaotError("derivative stepping needs a positive lead time")
        return (u_to - u_from) / tau
    raise GaotError(f"unknown stepping '{stepping}', expected one of {STEPPING_MODES}")


def _moments(scaler: StandardScaler, what: str) -> tuple[np.ndarray, np.ndarray]:
    if not hasattr(scaler, "mean_"):
        raise GaotError(f"fit_normalization: no {what} values in the training split")
    return scaler.mean_.copy(), np.maximum(np.sqrt(scaler.var_), STD_FLOOR)


def fit_normalization(samples: Sequence[Trajectory], stepping: str, time_dependent: bool) -> NormStats:
    """Z-score statistics over the given (training) samples.

    Inputs are the static fields, plus the current state u(t) for
    time-dependent data, over every snapshot and point.  Targets follow the
    stepping strategy over every all2all pair; pairs with zero lead time are
    skipped for derivative stepping.
    """
    inputs, targets = StandardScaler(), StandardScaler()
    t_max = 0.0
    for s in samples:
        if not time_dependent:
            inputs.partial_fit(s.input_fields)
            targets.partial_fit(s.snapshots[0])
            continue
        for n in range(s.snapshots.shape[0]):
            inputs.partial_fit(np.concatenate([s.input_fields, s.snapshots[n]], axis=1))
        for i, j in all2all_pairs(s.times):
            tau = float(s.times[j] - s.times[i])
            if stepping == "derivative" and tau <= 0:
                continue
            targets.partial_fit(stepping_target(stepping, s.snapshots[i], s.snapshots[j], tau))
        t_max = max(t_max, float(s.times[-1]))
    in_mean, in_std = _moments(inputs, "input")
    tgt_mean, tgt_std = _moments(targets, "target")
    stats = NormStats(in_mean, in_std, tgt_mean, tgt_std, t_max if t_max > 0 else 1.0)
    logger.debug("normalization fitted: target mean %s std %s", tgt_mean, tgt_std)
    return stats
