"""Built-in Riemannian geometries: flat space, the unit sphere and hyperbolic space.

Points of the sphere and of hyperbolic space are stored in their standard
embeddings (unit sphere in R^{d+1}, upper sheet of the hyperboloid
``<x, x>_L = -1`` in Minkowski space R^{d,1} with the time coordinate last),
which gives singularity-free closed-form geodesics and parallel transport.
Charts (hyperspherical angles, Poincare ball) are used only where local
coordinates are unavoidable: metric and Christoffel symbols.

All array operations broadcast over leading axes, so one call can move a
whole block of paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, StepSizeError

#: Distance from a chart singularity below which the spherical chart refuses points.
CHART_EPS = 1e-3
#: Max distance from the manifold accepted by :func:`project_to_manifold`.
TUBE = 0.5


def _sinc(r):
    # sin(r)/r, stable at 0
    return np.sinc(r / np.pi)


def _shc(r):
    # sinh(r)/r, stable at 0
    r = np.asarray(r, dtype=float)
    small = np.abs(r) < 1e-4
    safe = np.where(small, 1.0, r)
    return np.where(small, 1.0 + r * r / 6.0, np.sinh(safe) / safe)


class Manifold:
    """Common interface; concrete geometries override the geometric primitives.

    Attributes
    ----------
    dim : intrinsic dimension ``d``
    ambient_dim : length of the stored point vectors
    sectional : constant sectional curvature (0, 1 or -1)
    """

    kind = "abstract"
    sectional = 0.0

    def __init__(self, dim: int):
        if int(dim) != dim or dim < 1:
            raise ValueError(f"dimension must be a positive integer, got {dim!r}")
        self.dim = int(dim)

    # identity -------------------------------------------------------------
    @property
    def id(self) -> str:
        return f"{self.kind}:{self.dim}"

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def __eq__(self, other):
        return isinstance(other, Manifold) and self.id == other.id

    def __hash__(self):
        return hash(self.id)

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1

    @property
    def signature(self) -> np.ndarray:
        return np.ones(self.ambient_dim)

    @property
    def ricci_constant(self) -> float:
        """``c`` with ``Ric = c g``."""
        return (self.dim - 1) * self.sectional

    @property
    def curvature_bound(self) -> float:
        """Sharp ``K`` with ``Ric >= -K``."""
        return -self.ricci_constant + 0.0

    # ambient algebra ------------------------------------------------------
    def inner(self, a, b):
        """Ambient (Euclidean or Minkowski) inner product over the last axis."""
        return np.einsum("...i,...i->...", a * self.signature, b)

    def frame_coords(self, U, w):
        """Components ``<U e_i, w>`` of an ambient tangent vector ``w`` in frame ``U``."""
        return np.einsum("...ai,...a->...i", U * self.signature[:, None], w)

    def covector_coords(self, U, p):
        """Directional derivatives ``p(U e_i)`` of an ambient covector ``p``."""
        U = np.asarray(U)
        p = np.asarray(p)
        out = U[..., 0, :] * p[..., 0, None]
        for a in range(1, U.shape[-2]):
            out = out + U[..., a, :] * p[..., a, None]
        return out

    def residual(self, x):
        """Constraint violation of ambient points (0 on the manifold)."""
        raise NotImplementedError

    def tangent_project(self, x, w):
        raise NotImplementedError

    def check_point(self, x, tol: float = 1e-8):
        r = np.max(np.abs(self.residual(np.asarray(x, dtype=float))), initial=0.0)
        if not np.isfinite(r) or r > tol:
            raise DomainError(f"point off {self.id} by {r:.3g}")

    # base data ------------------------------------------------------------
    def base_point(self) -> np.ndarray:
        o = np.zeros(self.ambient_dim)
        if self.ambient_dim > self.dim:
            o[-1] = 1.0
        return o

    def base_frame(self) -> np.ndarray:
        return np.eye(self.ambient_dim, self.dim)

    def base(self) -> "FramePoint":
        return FramePoint(self.base_point(), self.base_frame())

    # geometry -------------------------------------------------------------
    def exp_transport(self, x, U, v):
        """Geodesic step ``exp_x(U v)`` with ``U`` parallel transported along it."""
        raise NotImplementedError

    def distance(self, x, y):
        raise NotImplementedError

    def project(self, x):
        raise NotImplementedError

    def ricci(self, U):
        """Ricci tensor in the frame ``U``: ``Ric(U e_i, U e_j)``."""
        U = np.asarray(U)
        shape = U.shape[:-2] + (self.dim, self.dim)
        return np.broadcast_to(self.ricci_constant * np.eye(self.dim), shape)

    # charts ---------------------------------------------------------------
    def to_chart(self, x):
        raise NotImplementedError

    def from_chart(self, q):
        raise NotImplementedError

    def check_chart(self, q):
        pass

    def metric(self, q):
        raise NotImplementedError

    def metric_derivative(self, q):
        """``dg[k, i, j] = d g_ij / d q^k`` in closed form."""
        raise NotImplementedError

    def christoffel(self, q):
        self.check_chart(q)
        return levi_civita(self.metric(q), self.metric_derivative(q))

    # sampling helpers (tests, test-function construction) -----------------
    def random_point(self, rng: np.random.Generator, scale: float = 1.0):
        fp = self.base()
        v = scale * rng.standard_normal(self.dim)
        return self.exp_transport(fp.x, fp.U, v)[0]

    def random_frame_point(self, rng: np.random.Generator, scale: float = 1.0) -> "FramePoint":
        fp = self.base()
        x, U = self.exp_transport(fp.x, fp.U, scale * rng.standard_normal(self.dim))
        Q, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
        return FramePoint(x, U @ Q)


def levi_civita(g, dg):
    """Christoffel symbols ``G[a, b, c]`` from a metric and its derivatives."""
    ginv = np.linalg.inv(g)
    # dg[k, i, j] = d_k g_ij ; lower-index symbol [d, b, c]
    low = 0.5 * (np.einsum("bdc->dbc", dg) + np.einsum("cdb->dbc", dg) - dg)
    return np.einsum("ad,dbc->abc", ginv, low)


class Flat(Manifold):
    kind = "flat"
    sectional = 0.0

    @property
    def ambient_dim(self):
        return self.dim

    def residual(self, x):
        return np.zeros(np.shape(x)[:-1])

    def tangent_project(self, x, w):
        return np.asarray(w, dtype=float)

    def exp_transport(self, x, U, v):
        w = np.einsum("...ai,...i->...a", U, v)
        return x + w, U

    def distance(self, x, y):
        return np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)

    def project(self, x):
        return np.asarray(x, dtype=float)

    def to_chart(self, x):
        return np.asarray(x, dtype=float)

    def from_chart(self, q):
        return np.asarray(q, dtype=float)

    def metric(self, q):
        return np.eye(self.dim)

    def metric_derivative(self, q):
        return np.zeros((self.dim,) * 3)


class Sphere(Manifold):
    """Unit sphere S^d in R^{d+1}."""

    kind = "sphere"
    sectional = 1.0

    def residual(self, x):
        return np.linalg.norm(x, axis=-1) - 1.0

    def tangent_project(self, x, w):
        return w - np.einsum("...a,...a->...", x, w)[..., None] * x

    def exp_transport(self, x, U, v):
        w = np.einsum("...ai,...i->...a", U, v)
        r = np.linalg.norm(w, axis=-1)[..., None]
        s = _sinc(r)
        x_new = np.cos(r) * x + s * w
        # U' = U + (w (cos r - 1)/r^2 - x sin r / r) (w^T U)
        coef_w = -0.5 * _sinc(r / 2) ** 2
        wu = np.einsum("...a,...ai->...i", w, U)
        U_new = U + (coef_w * w - s * x)[..., :, None] * wu[..., None, :]
        return x_new, U_new

    def distance(self, x, y):
        chord = np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)
        return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))

    def project(self, x):
        x = np.asarray(x, dtype=float)
        n = np.linalg.norm(x, axis=-1)
        if np.any(~np.isfinite(n)) or np.any(np.abs(n - 1.0) > TUBE):
            raise StepSizeError("ambient point left the projection tube around the sphere")
        return x / n[..., None]

    # hyperspherical chart: x0 = cos t1, x1 = sin t1 cos t2, ..., x_d = sin t1 ... sin t_d
    def from_chart(self, q):
        q = np.asarray(q, dtype=float)
        d = self.dim
        x = np.empty(q.shape[:-1] + (d + 1,))
        s = np.ones(q.shape[:-1])
        for i in range(d):
            x[..., i] = s * np.cos(q[..., i])
            s = s * np.sin(q[..., i])
        x[..., d] = s
        return x

    def to_chart(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        q = np.empty(x.shape[:-1] + (d,))
        for i in range(d - 1):
            q[..., i] = np.arctan2(np.linalg.norm(x[..., i + 1:], axis=-1), x[..., i])
        q[..., d - 1] = np.mod(np.arctan2(x[..., d], x[..., d - 1]), 2 * np.pi)
        return q

    def check_chart(self, q):
        q = np.asarray(q, dtype=float)
        polar = q[..., : self.dim - 1]
        if polar.size and (np.any(polar < CHART_EPS) or np.any(polar > np.pi - CHART_EPS)):
            raise DomainError("spherical chart is singular within 1e-3 of a pole")

    def metric(self, q):
        self.check_chart(q)
        q = np.asarray(q, dtype=float)
        diag = np.ones(self.dim)
        for i in range(1, self.dim):
            diag[i] = diag[i - 1] * np.sin(q[i - 1]) ** 2
        return np.diag(diag)

    def metric_derivative(self, q):
        q = np.asarray(q, dtype=float)
        g = np.diag(self.metric(q))
        d = self.dim
        dg = np.zeros((d, d, d))
        for k in range(d - 1):
            cot = np.cos(q[k]) / np.sin(q[k])
            for i in range(k + 1, d):
                dg[k, i, i] = 2.0 * cot * g[i]
        return dg


class Hyperbolic(Manifold):
    """Hyperbolic space H^d as the upper hyperboloid sheet in R^{d,1}."""

    kind = "hyperbolic"
    sectional = -1.0

    @property
    def signature(self):
        s = np.ones(self.ambient_dim)
        s[-1] = -1.0
        return s

    def residual(self, x):
        x = np.asarray(x, dtype=float)
        res = self.inner(x, x) + 1.0
        return np.where(x[..., -1] > 0, res, np.inf)

    def tangent_project(self, x, w):
        return w + self.inner(x, w)[..., None] * x

    def exp_transport(self, x, U, v):
        w = np.einsum("...ai,...i->...a", U, v)
        r = np.sqrt(np.maximum(self.inner(w, w), 0.0))[..., None]
        s = _shc(r)
        x_new = np.cosh(r) * x + s * w
        coef_w = 0.5 * _shc(r / 2) ** 2
        wu = np.einsum("...a,...ai->...i", w * self.signature, U)
        U_new = U + (coef_w * w + s * x)[..., :, None] * wu[..., None, :]
        return x_new, U_new

    def distance(self, x, y):
        dxy = np.asarray(x) - np.asarray(y)
        q = np.maximum(self.inner(dxy, dxy), 0.0)
        return 2.0 * np.arcsinh(np.sqrt(q) / 2.0)

    def project(self, x):
        x = np.asarray(x, dtype=float)
        n2 = -self.inner(x, x)
        if np.any(~np.isfinite(n2)) or np.any(n2 <= 0) or np.any(x[..., -1] <= 0):
            raise StepSizeError("ambient point not timelike future-pointing")
        n = np.sqrt(n2)
        if np.any(np.abs(n - 1.0) > TUBE):
            raise StepSizeError("ambient point left the projection tube around the hyperboloid")
        return x / n[..., None]

    # Poincare ball chart
    def from_chart(self, q):
        q = np.asarray(q, dtype=float)
        n2 = np.einsum("...i,...i->...", q, q)
        den = 1.0 - n2
        return np.concatenate([2 * q / den[..., None], ((1 + n2) / den)[..., None]], axis=-1)

    def to_chart(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., :-1] / (1.0 + x[..., -1:])

    def check_chart(self, q):
        if np.any(np.einsum("...i,...i->...", q, q) >= 1.0):
            raise DomainError("point outside the Poincare ball")

    def metric(self, q):
        self.check_chart(q)
        q = np.asarray(q, dtype=float)
        lam = 2.0 / (1.0 - q @ q)
        return lam ** 2 * np.eye(self.dim)

    def metric_derivative(self, q):
        q = np.asarray(q, dtype=float)
        lam = 2.0 / (1.0 - q @ q)
        # d_k(lam^2) = 2 lam^3 q_k
        return 2 * lam ** 3 * q[:, None, None] * np.eye(self.dim)[None]


_KINDS = {"flat": Flat, "sphere": Sphere, "hyperbolic": Hyperbolic}


def get_manifold(ident: str | Manifold) -> Manifold:
    """Manifold from an id string such as ``"sphere:2"``."""
    if isinstance(ident, Manifold):
        return ident
    kind, _, dim = str(ident).partition(":")
    kind = kind.strip().lower()
    if kind not in _KINDS:
        raise ValueError(f"unknown manifold {ident!r}; expected one of {sorted(_KINDS)} as 'kind:d'")
    try:
        d = int(dim) if dim else 2
    except ValueError:
        raise ValueError(f"bad dimension in manifold id {ident!r}") from None
    return _KINDS[kind](d)


@dataclass(frozen=True)
class FramePoint:
    """Base point ``x`` with orthonormal frame ``U`` (columns tangent at ``x``)."""

    x: np.ndarray
    U: np.ndarray

    def validate(self, M: Manifold, tol: float = 1e-10) -> "FramePoint":
        M.check_point(self.x, tol)
        tang = M.inner(self.x[..., None, :], np.swapaxes(self.U, -1, -2))
        if M.ambient_dim > M.dim and np.max(np.abs(tang)) > tol:
            raise DomainError("frame columns are not tangent")
        gram = np.einsum("...ai,...aj->...ij", self.U * M.signature[:, None], self.U)
        if np.max(np.abs(gram - np.eye(M.dim))) > tol:
            raise DomainError("frame is not orthonormal")
        return self


# functional interface ------------------------------------------------------

def metric_at(M: Manifold, q) -> np.ndarray:
    """Metric matrix at chart coordinates ``q``."""
    return M.metric(q)


def christoffel_at(M: Manifold, q) -> np.ndarray:
    """Christoffel symbols ``G[alpha, beta, gamma]`` at chart coordinates ``q``."""
    return M.christoffel(q)


def ricci_at(M: Manifold, fp: FramePoint) -> np.ndarray:
    return np.array(M.ricci(fp.U))


def geodesic_step(M: Manifold, fp: FramePoint, v) -> FramePoint:
    x, U = M.exp_transport(fp.x, fp.U, np.asarray(v, dtype=float))
    return FramePoint(x, U)


def distance(M: Manifold, x, y):
    return M.distance(x, y)


def project_to_manifold(M: Manifold, x):
    return M.project(x)
