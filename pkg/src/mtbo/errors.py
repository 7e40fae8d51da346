"""Exception types shared across the package."""


class MTBOError(Exception):
    """Base class for all package errors."""


class DegenerateRange(MTBOError, ValueError):
    """Quantization range collapsed to a single value (q0 == qN)."""


class UndefinedFeature(MTBOError, ArithmeticError):
    """A feature is mathematically undefined for the given input."""


class EmptyMatrix(MTBOError, ValueError):
    """A texture matrix has no entries (no valid voxel pairs or runs)."""


class NonConvergence(MTBOError, RuntimeError):
    """SMO hit its iteration cap before the KKT tolerance was met."""


class FactorizationFailure(MTBOError, ArithmeticError):
    """Joint covariance is not positive definite even after jitter escalation."""


class FitFailure(MTBOError, RuntimeError):
    """Every likelihood-maximization restart failed."""
