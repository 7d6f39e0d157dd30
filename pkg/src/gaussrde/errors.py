"""Exception hierarchy shared by all modules."""


class GaussRDEError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgument(GaussRDEError, ValueError):
    """An argument is out of range or inconsistent with another."""


class NumericalDegeneracy(GaussRDEError):
    """A matrix factorization or inversion was numerically singular."""


class DivergenceError(GaussRDEError):
    """A solver state left the admissible region or became non-finite."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class EstimationFailed(GaussRDEError):
    """No usable Monte Carlo samples were available."""


class NotElliptic(GaussRDEError):
    """The diffusion matrix lost full row rank along a trajectory."""
