"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class GrazingError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(GrazingError, ValueError):
    """Malformed or non-finite input."""


class DomainError(GrazingError, ValueError):
    """Input outside the domain where an operation is defined."""


class ConvexityViolation(DomainError):
    """A sampled Hessian direction contradicts uniform convexity."""

    def __init__(self, message: str, witness_x=None, witness_zeta=None):
        super().__init__(message)
        self.witness_x = witness_x
        self.witness_zeta = witness_zeta


class NoHitError(DomainError):
    """The backward ray misses the obstacle where a hit is required."""


class NearGrazingError(DomainError):
    """Derivative formulas requested too close to the grazing set."""


class DegenerateDirectionError(DomainError):
    """A direction-dependent denominator vanished."""


class PathInvalidError(DomainError):
    """A shift path leaves the exterior domain."""


class SingularWeightError(DomainError):
    """Weight evaluated on the singular set |v| = 0 near the boundary."""


class QuadratureError(GrazingError, RuntimeError):
    """Adaptive quadrature failed to reach tolerance."""

    def __init__(self, message: str, worst_interval=None):
        super().__init__(message)
        self.worst_interval = worst_interval


class DivergenceError(GrazingError, RuntimeError):
    """Picard iteration blew up."""


class SchemaError(GrazingError, ValueError):
    """Configuration document failed validation."""


class BoundViolation(GrazingError, AssertionError):
    """A numerically evaluated inequality or identity failed."""


class InvalidFieldError(InvalidInputError):
    """A field callback returned non-finite or unbounded values."""


class ExtrapolationError(DomainError):
    """An interpolation read fell outside the grid and its closure."""
