"""Smooth functions on the built-in manifolds.

A :class:`SiteFunction` evaluates on ambient points and supplies its
Euclidean ambient partial derivatives (a covector).  Pairing that covector
with frame columns gives the Riemannian gradient in frame coordinates, for
every model, without projecting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import FramePoint, Manifold

CUTOFF_INNER = 10.0
CUTOFF_OUTER = 11.0


@dataclass(frozen=True)
class SiteFunction:
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    covector: Callable[[np.ndarray], np.ndarray]
    lipschitz: float = np.inf

    def __call__(self, x):
        return self.value(x)

    def grad_norm(self, M: Manifold, x, U):
        """``|grad f|`` at ``x`` using the orthonormal frame ``U`` there."""
        return np.linalg.norm(M.covector_coords(U, self.covector(x)), axis=-1)


def constant(c: float) -> SiteFunction:
    return SiteFunction(f"const({c})", lambda x: np.full(np.shape(x)[:-1], float(c)),
                        lambda x: np.zeros(np.shape(x)), 0.0)


def coordinate(M: Manifold, i: int) -> SiteFunction:
    if not 0 <= i < M.ambient_dim:
        raise ValueError(f"coordinate index {i} out of range for {M.id}")
    e = np.zeros(M.ambient_dim)
    e[i] = 1.0
    lip = np.inf if M.kind == "hyperbolic" else 1.0
    return SiteFunction(f"x{i}", lambda x: x[..., i], lambda x: np.broadcast_to(e, np.shape(x)), lip)


def height(M: Manifold, v) -> SiteFunction:
    """``<x, v>`` in the ambient (Minkowski for hyperbolic space) inner product."""
    v = np.asarray(v, dtype=float)
    if v.shape != (M.ambient_dim,):
        raise ValueError(f"height vector needs {M.ambient_dim} components")
    cov = M.signature * v
    lip = np.inf if M.kind == "hyperbolic" else float(np.linalg.norm(v))
    return SiteFunction(f"height({','.join(f'{c:g}' for c in v)})", lambda x: x @ cov,
                        lambda x: np.broadcast_to(cov, np.shape(x)), lip)


def tanh_coordinate(M: Manifold, i: int) -> SiteFunction:
    base = coordinate(M, i)
    # |grad x_i| <= sqrt(1 + x_i^2) on the hyperboloid, 1 elsewhere; sech^2 kills the growth
    return SiteFunction(f"tanh(x{i})", lambda x: np.tanh(x[..., i]),
                        lambda x: base.covector(x) / np.cosh(x[..., i])[..., None] ** 2, 1.0)


def _chord2(M: Manifold, c):
    """Smooth squared-distance surrogate ``q(x)`` and its covector."""
    c = np.asarray(c, dtype=float)
    if M.kind == "hyperbolic":
        cov = -2.0 * M.signature * c
        return (lambda x: -2.0 * M.inner(x, c) - 2.0), (lambda x: np.broadcast_to(cov, np.shape(x)))
    return (lambda x: np.sum((x - c) ** 2, axis=-1)), (lambda x: 2.0 * (x - c))


def bump(M: Manifold, center, width: float) -> SiteFunction:
    """Gaussian bump ``exp(-q(x, c) / width^2)``; ``q`` is the squared chord
    (``2 cosh(rho) - 2`` on hyperbolic space)."""
    center = np.asarray(center, dtype=float)
    if center.shape != (M.ambient_dim,):
        raise ValueError(f"bump center needs {M.ambient_dim} components")
    M.check_point(center, 1e-8)
    q, dq = _chord2(M, center)
    w2 = float(width) ** 2

    def value(x):
        return np.exp(-q(x) / w2)

    def covector(x):
        return (-value(x) / w2)[..., None] * dq(x)

    if M.kind == "hyperbolic":
        r = np.linspace(0.0, 30.0, 30001)
        lip = float(np.max(2 * np.sinh(r) / w2 * np.exp(-2 * (np.cosh(r) - 1) / w2)))
    else:
        lip = float(np.sqrt(2.0) / width * np.exp(-0.5))
    return SiteFunction(f"bump(w={width:g})", value, covector, lip)


def _smooth_step(t):
    t = np.asarray(t, dtype=float)

    def psi(u):
        pos = u > 0
        return np.where(pos, np.exp(-1.0 / np.where(pos, u, 1.0)), 0.0)

    def dpsi(u):
        pos = u > 0
        uu = np.where(pos, u, 1.0)
        return np.where(pos, np.exp(-1.0 / uu) / uu ** 2, 0.0)

    a, b = psi(t), psi(1.0 - t)
    da, db = dpsi(t), -dpsi(1.0 - t)
    s = a + b
    return a / s, (da * s - a * (da + db)) / s ** 2


def test_function(M: Manifold, y: FramePoint, inner: float = CUTOFF_INNER,
                  outer: float = CUTOFF_OUTER) -> SiteFunction:
    """Function with ``|grad f|(y) = 1`` and ``Hess f(y) = 0``.

    ``f = <x - y, v>`` (flat), ``<x, v>`` (sphere), ``<x, v>_L`` (hyperbolic)
    with ``v = U e_1`` the first frame vector at ``y``; the unbounded models are
    multiplied by a smooth cutoff equal to 1 within distance ``inner`` of ``y``.
    """
    v = y.U[:, 0]
    if M.kind == "sphere":
        return height(M, v)
    yx = np.asarray(y.x, dtype=float)
    cov_lin = M.signature * v
    if M.kind == "flat":
        lin = lambda x: (x - yx) @ v  # noqa: E731
    else:
        lin = lambda x: x @ cov_lin  # noqa: E731

    def rho_cov(x):
        if M.kind == "flat":
            diff = x - yx
            r = np.linalg.norm(diff, axis=-1)
            return r, diff / np.maximum(r, 1e-300)[..., None]
        ip = -M.inner(x, yx)
        r = np.arccosh(np.maximum(ip, 1.0))
        den = np.sqrt(np.maximum(ip * ip - 1.0, 1e-300))
        return r, -(M.signature * yx) / den[..., None]

    def pieces(x):
        r, dr = rho_cov(x)
        s, ds = _smooth_step((r - inner) / (outer - inner))
        return 1.0 - s, -(ds / (outer - inner))[..., None] * dr

    def value(x):
        chi, _ = pieces(x)
        return lin(x) * chi

    def covector(x):
        chi, dchi = pieces(x)
        l = lin(x)
        return cov_lin * chi[..., None] + l[..., None] * dchi

    if M.kind == "flat":
        lip = 1.0 + outer * 2.0 / (outer - inner)
    else:
        lip = np.cosh(outer) * (1.0 + 2.0 / (outer - inner))
    return SiteFunction("test-function", value, covector, float(lip))
