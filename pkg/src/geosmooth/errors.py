"""Exception hierarchy shared across the package."""


class GeosmoothError(Exception):
    """Base class for all package errors."""


class ConfigError(GeosmoothError, ValueError):
    """Invalid configuration value or unknown configuration key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class InvalidPlanError(ConfigError):
    pass


class NotEnoughNeighborsError(GeosmoothError, ValueError):
    pass


class FlowBlowupError(GeosmoothError, FloatingPointError):
    """The probability-flow integrator produced a non-finite state."""

    def __init__(self, t):
        super().__init__(f"non-finite state in probability flow at t={t:.6g}")
        self.t = t


class SingularMomentsError(GeosmoothError, ArithmeticError):
    pass


class InsufficientScalesError(GeosmoothError, ValueError):
    pass


class DegenerateFoldError(GeosmoothError, ValueError):
    pass


class SingularityError(GeosmoothError, ArithmeticError):
    pass


class WiringError(GeosmoothError, ValueError):
    """Estimator inputs were built for a different kernel, grid or arm."""


class EmptyArmError(GeosmoothError, ValueError):
    pass


class ContaminationError(GeosmoothError, ValueError):
    """Reference pool and working sample share units."""


class DegenerateVarianceError(GeosmoothError, ValueError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class OracleUnavailableError(GeosmoothError, NotImplementedError):
    pass


class GridMismatchError(GeosmoothError, ValueError):
    pass


class LogDomainError(GeosmoothError, ValueError):
    pass
