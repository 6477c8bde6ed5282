"""Exception types raised across the package."""


class TiltError(Exception):
    """Base class for every error raised by tiltsde."""


class InvalidArgumentError(TiltError, ValueError):
    pass


class DomainError(TiltError, ValueError):
    """An argument left the domain of a branch, inverse derivative or reward."""


class UnsupportedDivergenceError(TiltError, NotImplementedError):
    pass


class NumericalRangeError(TiltError, ArithmeticError):
    """Overflow, underflow or loss of positivity in a numerical scheme."""


class DegenerateTiltError(NumericalRangeError):
    pass


class InfeasibleConstraintError(TiltError, ValueError):
    pass


class DivergedPathsError(TiltError, RuntimeError):
    def __init__(self, message, n_diverged=0, n_paths=0):
        super().__init__(message)
        self.n_diverged = n_diverged
        self.n_paths = n_paths


class DegenerateWeightsError(TiltError, ValueError):
    pass


class BoundViolationError(TiltError, ValueError):
    pass


class ConfigError(TiltError, ValueError):
    """Configuration validation failure. ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
