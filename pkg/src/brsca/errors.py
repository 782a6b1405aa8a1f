"""Exception hierarchy shared by every solver stage."""


class BrscaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BrscaError, ValueError):
    """Array shapes do not agree with the system or horizon."""


class NumericalError(BrscaError, ArithmeticError):
    """A factorization failed or a matrix is too ill-conditioned to trust."""


class CertificateError(BrscaError):
    """An obstacle's curvature certificate does not bound its curvature."""


class StateError(BrscaError):
    """Dual variables and the constraint set they price are out of sync."""


class ConvergenceError(BrscaError):
    """An iterative solve hit its cap; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SubproblemInfeasible(ConvergenceError):
    """Multipliers reached their cap: ``best`` is the penalized (elastic) solution."""


class ReferencePointError(BrscaError):
    """No usable linearization point could be constructed for a violation."""


class GenerationError(BrscaError):
    """Random scenario generation ran out of its rejection budget."""


class BaselineError(BrscaError):
    """The grid planner found no collision-free path."""


class ScenarioError(BrscaError, ValueError):
    """A scenario file is malformed; ``where`` names the offending field or line."""

    def __init__(self, message, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where
