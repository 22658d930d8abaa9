"""Exception hierarchy shared by the library and the experiment runner."""


class InputError(ValueError):
    """Malformed or non-finite input data."""


class DimensionError(InputError):
    """Array shapes or requested ranks are incompatible."""


class ParameterError(ValueError):
    """A tuning parameter lies outside its admissible range."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    The last iterate is kept on ``last_iterate`` so callers can inspect or
    warm-start from it.
    """

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class SolverError(ConvergenceError):
    """The companion-transform root finder failed."""


class ConsistencyError(RuntimeError):
    """Two independent routes to the same quantity disagree."""


class UnsupportedFamilyError(ValueError):
    """The requested operation is only defined for another GLM family."""


class ConfigurationError(ValueError):
    """An experiment configuration is invalid or self-contradictory."""


class AggregateError(RuntimeError):
    """Too many replicates failed for an aggregate to be reported."""

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


class FoldError(RuntimeError):
    """A fitting error raised while processing one cross-fitting fold."""

    def __init__(self, fold, cause):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause
