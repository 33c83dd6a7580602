"""Monte Carlo tools for horizontal Brownian motion, path-space gradients and functional inequalities."""

from . import constants, cylinder, geometry, hbm, quadrature, she, verify
from .constants import c0, c1, c2n, c_of_k
from .exceptions import DomainError, NumericalError, PathspaceError, StepSizeError, UsageError
from .geometry import FramePoint, get_manifold
from .hbm import DiscretePath, PathSampler, sample_path

__all__ = [
    "constants", "cylinder", "geometry", "hbm", "quadrature", "she", "verify",
    "c0", "c1", "c2n", "c_of_k", "DomainError", "NumericalError", "PathspaceError", "StepSizeError",
    "UsageError", "FramePoint", "get_manifold", "DiscretePath", "PathSampler", "sample_path",
]
