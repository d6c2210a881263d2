"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`SafeDoeError`
so callers (the CLI in particular) can tell library failures from bugs.
"""


class SafeDoeError(Exception):
    """Base class for all library errors."""


class DimensionError(SafeDoeError, ValueError):
    pass


class NotFittedError(SafeDoeError):
    pass


class ConditioningError(SafeDoeError):
    """Cholesky factorisation failed even after jitter escalation."""


class IntegrationError(SafeDoeError):
    """The ODE integrator produced non-finite states.

    Carries the offending design and parameters for diagnosis.
    """

    def __init__(self, message, u=None, theta=None):
        super().__init__(message)
        self.u = u
        self.theta = theta


class EstimationError(SafeDoeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class StatisticsError(SafeDoeError, ValueError):
    pass


class OptimizationError(SafeDoeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(SafeDoeError):
    """Config failed validation; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class CampaignAborted(SafeDoeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
