"""Exception hierarchy shared by the synthesis and online modules."""


class RfmpcError(Exception):
    """Base class for all errors raised by this package."""


class NotStabilizable(RfmpcError):
    """Riccati iteration did not converge; (A, B) is likely not stabilizable."""


class NotContractive(RfmpcError):
    """The closed-loop matrix A + BK has spectral radius >= 1."""


class InvalidBeta(RfmpcError):
    """Requested contraction factor lies outside (rho(A + BK), 1)."""


class RadiusTooLarge(RfmpcError):
    """No ellipsoid with the requested inner radius fits inside the constraints."""

    def __init__(self, message, gamma_min=None, gamma_max=None):
        super().__init__(message)
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max

    def __reduce__(self):
        return type(self), (str(self), self.gamma_min, self.gamma_max)


class EmptyMargin(RfmpcError):
    """A tightened bound became non-positive."""


class Infeasible(RfmpcError):
    """A quadratic program has an empty feasible set."""


class MaxIterations(RfmpcError):
    """An iterative solver hit its iteration cap."""


class StageInfeasible(Infeasible):
    """A stage QP of the parallel scheme became infeasible.

    ``stage`` is the horizon index of the failing QP; ``step`` is filled in by
    the closed-loop simulator with the time index at which it happened.
    """

    def __init__(self, stage, message="", step=None):
        super().__init__(message or f"stage QP {stage} infeasible")
        self.stage = stage
        self.step = step

    def __reduce__(self):
        # keep stage and step when crossing a process boundary
        return type(self), (self.stage, str(self), self.step)


class NotContracting(RfmpcError):
    """Fitted contraction ratio is >= 1."""


class NoConvergence(RfmpcError):
    """Reference solve did not converge within its iteration cap."""
