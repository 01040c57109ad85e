# models/__init__.py
from .errors import (ConfigError, GaotError, NonFiniteError, NotFittedError, ShapeError, SolverError,
                     TrainingDivergedError)
from .gaot_net import GAOT, GaotConfig, ModelInput, SampleGraph, forward, step
from .spatial import PointCloud, build_latent_grid, drop_edges, radius_query_all
from .stepping import NormStats, all2all_pairs, fit_normalization

__all__ = [
    'GAOT', 'GaotConfig', 'ModelInput', 'SampleGraph', 'forward', 'step',
    'PointCloud', 'build_latent_grid', 'drop_edges', 'radius_query_all',
    'NormStats', 'all2all_pairs', 'fit_normalization',
    'GaotError', 'ShapeError', 'NonFiniteError', 'NotFittedError', 'ConfigError', 'SolverError',
    'TrainingDivergedError',
]
