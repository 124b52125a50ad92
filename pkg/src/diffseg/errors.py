"""Exception hierarchy.

Each error subclasses the closest builtin so callers that only care about
``ValueError`` still catch parameter problems.
"""


class DiffSegError(Exception):
    """Base class for all package errors."""


class ParameterError(DiffSegError, ValueError):
    pass


class TimestepError(ParameterError):
    pass


class ShapeError(DiffSegError, ValueError):
    pass


class GridError(DiffSegError, ValueError):
    pass


class LoadError(DiffSegError, OSError):
    pass


class ValidationError(DiffSegError, ValueError):
    pass


class MappingError(DiffSegError, KeyError):
    pass


class DegenerateDataError(DiffSegError, ValueError):
    pass


class UndefinedLossError(DiffSegError, ValueError):
    pass


class UndefinedMetricsError(DiffSegError, ValueError):
    pass


class TrainingError(DiffSegError, RuntimeError):
    """Raised when optimisation diverges (non-finite loss)."""


class ConfigError(DiffSegError, ValueError):
    pass
