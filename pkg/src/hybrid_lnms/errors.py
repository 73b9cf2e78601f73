"""Exception types shared across the package."""


class HybridLnmsError(Exception):
    """Base class for all package errors."""


class InvalidParameter(HybridLnmsError, ValueError):
    pass


class DimensionMismatch(HybridLnmsError, ValueError):
    pass


class NoActiveMode(HybridLnmsError):
    """No mode guard holds at the queried state-input pair."""


class NoConvergence(HybridLnmsError):
    pass


class NotConverged(HybridLnmsError):
    """Invariant-set iteration hit its cap; ``partial`` holds the last iterate."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class InvalidModeSequence(HybridLnmsError, ValueError):
    pass


class UnboundedBox(HybridLnmsError, ValueError):
    pass


class InfeasibleProblem(HybridLnmsError):
    """No mode sequence admits a feasible trajectory from the given state."""


class TooManySequences(HybridLnmsError):
    pass


class UnsupportedDimension(HybridLnmsError, ValueError):
    pass


class InvalidRegion(HybridLnmsError, ValueError):
    pass


class SkippedInfeasible(HybridLnmsError):
    """A stored mode sequence is infeasible at its own state."""
