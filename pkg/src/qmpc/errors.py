"""Exception types shared across the package."""


class QmpcError(Exception):
    """Base class for package errors."""


class DimensionError(QmpcError, ValueError):
    """An array argument has the wrong shape or length."""


class DivergenceError(QmpcError, RuntimeError):
    """A numeric quantity became non-finite.

    Carries the step index at which divergence was detected, when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonConvergenceError(QmpcError, RuntimeError):
    """An iterative scheme hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InfeasibleError(QmpcError, RuntimeError):
    """A constrained problem has no feasible point."""


class ConfigError(QmpcError, ValueError):
    """An experiment configuration file is malformed or inconsistent."""
