"""Exception hierarchy.

Every error raised by this package derives from :class:`SandregError`, so
callers (notably the command line front end) can map failure classes to
exit codes without matching on message text.
"""


class SandregError(Exception):
    """Base class for all package errors."""


class DataError(SandregError):
    """Malformed input data: shapes, missing values, non-finite entries."""


class ConfigError(SandregError):
    """Invalid run configuration (unknown keys, bad types, bad values)."""


class StructureError(SandregError):
    """A working-covariance structure or parameter vector is inadmissible.

    Carries ``parameter`` naming the offending coordinate when known.
    """

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class DegenerateMeanError(SandregError):
    """A fitted mean reached the boundary of the variance function's domain."""


class RankDeficiencyError(SandregError):
    """A normal matrix was singular or numerically rank deficient.

    ``condition`` holds the condition-number estimate at failure.
    """

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class LeverageError(SandregError):
    """A cluster carries full leverage: its leave-one-out update is singular.

    ``cluster`` identifies the offending cluster index.
    """

    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


class ConvergenceError(SandregError):
    """An iterative solver failed to converge.

    Carries the last iterate (``last_beta``) and its score norm so callers
    can inspect how close the solver got.
    """

    def __init__(self, message, last_beta=None, score_norm=None):
        super().__init__(message)
        self.last_beta = last_beta
        self.score_norm = score_norm


class IntegrationError(SandregError):
    """Adaptive quadrature could not reach the requested tolerance.

    ``best_value`` and ``error_estimate`` hold the best available result.
    """

    def __init__(self, message, best_value=None, error_estimate=None):
        super().__init__(message)
        self.best_value = best_value
        self.error_estimate = error_estimate
