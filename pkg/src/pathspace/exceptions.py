"""Exception hierarchy shared by all modules."""


class PathspaceError(Exception):
    """Base class for all package errors."""


class DomainError(PathspaceError, ValueError):
    """A point lies off the manifold or outside the active chart."""


class StepSizeError(PathspaceError, RuntimeError):
    """An integrator left the projection tube around the manifold."""


class UsageError(PathspaceError, ValueError):
    """Incompatible arguments (grid mismatch, bad window, bad config)."""


class NumericalError(PathspaceError, ArithmeticError):
    """A numerically singular quantity was encountered."""
