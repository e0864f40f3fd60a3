"""Exception hierarchy shared by all orbitshift modules."""


class OrbitShiftError(Exception):
    """Base class for all errors raised by orbitshift."""


class DomainError(OrbitShiftError, ValueError):
    """A point lies outside the domain of a field (R <= 0, B_phi = 0, non-finite)."""


class IntegrationError(OrbitShiftError, RuntimeError):
    """The ODE integrator failed (step-size collapse or solver error)."""


class DerivativeOrderError(OrbitShiftError, ValueError):
    """A computation requested derivatives a field cannot provide."""


class ConvergenceError(OrbitShiftError, RuntimeError):
    """Newton iteration did not converge."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = tuple(history)


class DegenerateCycleError(OrbitShiftError, ArithmeticError):
    """A cycle has a unit multiplier, so DP^m - I (or its analogue) is singular."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class InsufficientDataError(OrbitShiftError, ValueError):
    """Too few usable points for a convergence-order fit."""


class ConfigError(OrbitShiftError, ValueError):
    """Invalid run configuration."""
