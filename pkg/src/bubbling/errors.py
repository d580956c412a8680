"""Exception types shared across the pipeline.

Each stage raises its own subclass so the command line front end can map
failures to exit codes without inspecting messages.
"""


class BubblingError(Exception):
    """Base class for every error raised by this package."""


class DomainError(BubblingError, ValueError):
    """Argument outside the domain of a closed-form expression."""


class SingularSystem(BubblingError):
    """Linear system is singular or incompatible.

    ``smallest_singular_value`` is filled in when the solver can estimate it.
    """

    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class NoConvergence(BubblingError):
    """Iterative method stopped before reaching its tolerance."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class BlowUp(BubblingError):
    """Radial ODE solution reaches infinity before the requested endpoint."""

    def __init__(self, t_star, message=None):
        super().__init__(message or f"solution blows up at t* = {t_star:.12g}")
        self.t_star = t_star


class BadProblem(BubblingError, ValueError):
    """Curvature data violate the standing hypotheses."""


class BadPoints(BadProblem):
    """Concentration points are too close to each other or otherwise invalid."""


class ConfigError(BubblingError, ValueError):
    """Malformed or unknown configuration entry."""


class ResolutionError(BubblingError):
    """Grid too coarse for the requested bubble scale."""


class InsufficientResolution(BubblingError):
    """Too few angular samples for the requested Fourier modes."""


class NoContraction(NoConvergence):
    """Fixed-point map failed to contract."""


class ReducedSolveFailed(BubblingError):
    """Reduced equations for the bubble offsets could not be solved."""

    def __init__(self, message, residual=float("nan"), history=()):
        super().__init__(message)
        self.residual = residual
        self.history = list(history)


class Diverged(NoConvergence):
    """Newton iterate left the admissible range."""


class StepCollapse(BubblingError):
    """Continuation step length fell below its floor."""

    def __init__(self, message, step=float("nan")):
        super().__init__(message)
        self.step = step
