# models/errors.py - Exception hierarchy shared by the library and the CLI


class GaotError(Exception):
    """Base class for every failure raised by this package"""


class ShapeError(GaotError, ValueError):
    pass


class NonFiniteError(GaotError, FloatingPointError):
    pass


class NotFittedError(GaotError, RuntimeError):
    pass


class ConfigError(GaotError, ValueError):
    pass


class SolverError(GaotError, RuntimeError):
    pass


class TrainingDivergedError(GaotError, RuntimeError):
    pass
