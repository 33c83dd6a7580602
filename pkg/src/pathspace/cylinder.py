"""Cylinder functions on path space, their L2-gradients and Dirichlet energies.

A cylinder function is ``F(gamma) = f(int g_1(s, gamma_s) ds, ..., int g_m(s, gamma_s) ds)``.
Integrals are trapezoid integrals along the simulation grid (optionally over
a sub-window).  The L2-gradient is returned on the grid as an :class:`HVector`
whose trapezoid pairing with a direction ``h`` reproduces the derivative of
the discrete functional along ``gamma_s -> exp(eps U_s h_s)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import constants as _const
from ._stats import Estimate
from .exceptions import NumericalError, UsageError
from .functions import SiteFunction
from .hbm import DiscretePath, map_paths
from .quadrature import (interval_weights, node_products, product_integral, square_weights, tail_integrals,
                         trapezoid_weights)


@dataclass(frozen=True)
class Integrand:
    """``g(s, x) = weight(s) * site(x)`` restricted to ``window`` (whole horizon if None)."""

    site: SiteFunction
    window: tuple[float, float] | None = None
    weight: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def lipschitz(self) -> float:
        return self.site.lipschitz

    def quad_weights(self, times) -> np.ndarray:
        a, b = self.window if self.window is not None else (times[0], times[-1])
        w = interval_weights(times, a, b)
        if self.weight is not None:
            w = w * self.weight(times)
        return w

    def with_window(self, a, b) -> "Integrand":
        if self.window is not None:
            a, b = max(a, self.window[0]), min(b, self.window[1])
        return Integrand(self.site, (a, b), self.weight)


@dataclass(frozen=True)
class CylinderFunction:
    """``F = outer(y)`` with ``y_j = int g_j(s, gamma_s) ds``.

    ``outer`` maps ``(P, m) -> (P,)`` and ``outer_grad`` maps ``(P, m) -> (P, m)``.
    """

    integrands: tuple[Integrand, ...]
    outer: Callable[[np.ndarray], np.ndarray]
    outer_grad: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    @property
    def m(self) -> int:
        return len(self.integrands)

    def integrals(self, path: DiscretePath) -> np.ndarray:
        out = np.empty((path.n_paths, self.m))
        for j, g in enumerate(self.integrands):
            out[:, j] = g.site.value(path.points) @ g.quad_weights(path.times)
        return out

    def __call__(self, path: DiscretePath) -> np.ndarray:
        return self.outer(self.integrals(path))


def linear(integrands: Sequence[Integrand], coefs=None, name: str = "") -> CylinderFunction:
    c = np.ones(len(integrands)) if coefs is None else np.asarray(coefs, dtype=float)
    return CylinderFunction(tuple(integrands), lambda y: y @ c,
                            lambda y: np.broadcast_to(c, y.shape), name)


@dataclass(frozen=True)
class HVector:
    """Grid samples of an element of L2([0, T]; R^d); ``values`` is ``(..., n+1, d)``.

    The element is the piecewise-linear interpolant of the samples and inner
    products are its exact L2 inner products.
    """

    times: np.ndarray
    values: np.ndarray

    def inner(self, other: "HVector") -> np.ndarray:
        return product_integral(self.values, other.values, self.times)

    def norm2(self, a: float | None = None, b: float | None = None) -> np.ndarray:
        S, C = node_products(self.values)
        ws, wc = square_weights(self.times, a, b)
        return S @ ws + C @ wc

    def norm2_windows(self, windows) -> list[np.ndarray]:
        """``norm2`` over several ``(a, b)`` windows sharing one pass over the values."""
        S, C = node_products(self.values)
        out = []
        for a, b in windows:
            ws, wc = square_weights(self.times, a, b)
            out.append(S @ ws + C @ wc)
        return out

    def pairing(self, h: np.ndarray) -> np.ndarray:
        """Trapezoid pairing ``sum_k w_k <v_k, h_k>``: the directional derivative along ``h``."""
        return np.sum(self.values * h, axis=-1) @ trapezoid_weights(self.times)


@dataclass(frozen=True)
class DampingMatrix:
    times: np.ndarray
    matrices: np.ndarray  # (..., n+1, d, d)
    inverse: np.ndarray = field(default=None, repr=False)
    #: ``m_k`` when ``M_k = m_k I`` for every node (isotropic damping), else None
    scalar: np.ndarray | None = field(default=None, repr=False)

    def apply(self, v: np.ndarray, inverse: bool = False) -> np.ndarray:
        """``M_k v_k`` (or ``M_k^{-1} v_k``) for node values ``v`` of shape ``(..., n+1, d)``."""
        if self.scalar is not None:
            m = 1.0 / self.scalar if inverse else self.scalar
            return v * m[:, None]
        A = self.inverse if inverse else self.matrices
        return np.matmul(A, v[..., None])[..., 0]


def evaluate(F: CylinderFunction, path: DiscretePath) -> np.ndarray:
    """``F(gamma)`` for every path in the batch."""
    return F(path)


def grad(F: CylinderFunction, path: DiscretePath, y: np.ndarray | None = None) -> HVector:
    """L2-gradient ``DF(s_k) = sum_j d_j f * U_k^{-1} grad g_j(s_k, x_k)``."""
    M = path.manifold
    times = path.times
    P, d = path.n_paths, M.dim
    if F.m == 0:
        return HVector(times, np.zeros((P, times.size, d)))
    y = F.integrals(path) if y is None else y
    df = F.outer_grad(y)
    full = trapezoid_weights(times)
    out = np.zeros((P, times.size, d))
    for j, g in enumerate(F.integrands):
        ratio = g.quad_weights(times) / full
        live = np.flatnonzero(ratio != 0)
        if live.size == 0:
            continue
        sl = slice(live[0], live[-1] + 1)
        # covectors are only needed on the (contiguous) support of the window
        coords = M.covector_coords(path.frames[:, sl], g.site.covector(path.points[:, sl]))
        out[:, sl] += (df[:, j, None] * ratio[sl])[..., None] * coords
    return HVector(times, out)


def _rk4(times, ric, d):
    """Solve ``M' = -1/2 M Ric(t)``, ``M(0) = I`` on the grid; ``ric`` is ``(..., n+1, d, d)``."""
    n1 = times.size
    lead = ric.shape[:-3]
    out = np.empty(lead + (n1, d, d))
    Mk = np.broadcast_to(np.eye(d), lead + (d, d)).copy()
    out[..., 0, :, :] = Mk
    f = lambda Mm, R: -0.5 * Mm @ R  # noqa: E731
    for k in range(n1 - 1):
        h = times[k + 1] - times[k]
        R0, R1 = ric[..., k, :, :], ric[..., k + 1, :, :]
        Rm = 0.5 * (R0 + R1)
        k1 = f(Mk, R0)
        k2 = f(Mk + 0.5 * h * k1, Rm)
        k3 = f(Mk + 0.5 * h * k2, Rm)
        k4 = f(Mk + h * k3, R1)
        Mk = Mk + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[..., k + 1, :, :] = Mk
    return out


def damping(path: DiscretePath) -> DampingMatrix:
    """Ricci damping ``M_t`` along each path by RK4 on the path grid.

    On the built-in (Einstein) geometries Ric is the same constant matrix in
    every orthonormal frame, so one solve serves the whole batch.
    """
    M = path.manifold
    times = path.times
    ric = np.broadcast_to(M.ricci_constant * np.eye(M.dim), (times.size, M.dim, M.dim))
    mats = _rk4(times, ric, M.dim)
    det = np.linalg.det(mats)
    if np.any(np.abs(det) <= 1e-12):
        raise NumericalError("damping matrix numerically singular")
    diag = mats[..., 0, 0]
    iso = np.allclose(mats, diag[..., None, None] * np.eye(M.dim), rtol=0, atol=0)
    return DampingMatrix(times, mats, np.linalg.inv(mats), diag.copy() if iso else None)


def damped_grad(F: CylinderFunction, path: DiscretePath, DF: HVector | None = None,
                damp: DampingMatrix | None = None) -> HVector:
    """``DtF(t_k) = M_k^{-1} int_{t_k}^T M_s DF(s) ds`` (trapezoid)."""
    DF = grad(F, path) if DF is None else DF
    damp = damping(path) if damp is None else damp
    tail = tail_integrals(damp.apply(DF.values), DF.times, axis=-2)
    return HVector(DF.times, damp.apply(tail, inverse=True))


def undamped(path: DiscretePath) -> DampingMatrix:
    d = path.manifold.dim
    eye = np.broadcast_to(np.eye(d), (path.times.size, d, d))
    return DampingMatrix(path.times, eye, eye, np.ones(path.times.size))


def _pairwise(F, G, paths, fn) -> Estimate:
    def block(p):
        a = fn(F, p)
        b = a if G is F else fn(G, p)
        return {"e": 0.5 * a.inner(b)}

    return Estimate.from_samples(map_paths(paths, block)["e"])


def energy(F: CylinderFunction, G: CylinderFunction, paths) -> Estimate:
    """``E(F, G) = 1/2 E<DF, DG>_H`` with its standard error."""
    return _pairwise(F, G, paths, grad)


def damped_energy(F: CylinderFunction, G: CylinderFunction, paths) -> Estimate:
    """``1/2 E<DtF, DtG>_H`` with Ricci-damped gradients."""
    return _pairwise(F, G, paths, lambda H, p: damped_grad(H, p))


def window_split(path_T: float, n: int) -> float:
    if n < 1:
        raise UsageError("window parameter n must be >= 1")
    split = path_T - 1.0 / n
    if split < -1e-12:
        raise UsageError(f"T={path_T} shorter than the tail window 1/n={1.0 / n}")
    return max(split, 0.0)


def ek_parts(DF: HVector, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(int_0^{T-1/n} |DF|^2, int_{T-1/n}^T |DF|^2)`` per path."""
    T = float(DF.times[-1])
    split = window_split(T, n)
    head, tail = DF.norm2_windows([(DF.times[0], split), (split, T)])
    return head, tail


def ek_weights(K: float, T: float, n: int) -> tuple[float, float]:
    return (1 + n) * _const.c1(K, T), (1.0 / n + 1.0 / n ** 2) * _const.c2n(K, T, n)


def ek_energy(G: CylinderFunction, K: float, T: float, n: int, paths, scale: tuple[float, float] = (1.0, 1.0)) -> Estimate:
    """Windowed energy ``(1+n) C1 E int_0^{T-1/n}|DG|^2 + (1/n+1/n^2) C2n E int_{T-1/n}^T |DG|^2``."""
    if abs(paths.T - T) > 1e-12:
        raise UsageError(f"paths have horizon {paths.T}, energy requested for T={T}")
    window_split(T, n)
    a, b = ek_weights(K, T, n)
    a, b = a * scale[0], b * scale[1]

    def block(p):
        head, tail = ek_parts(grad(G, p), n)
        return {"e": a * head + b * tail}

    return Estimate.from_samples(map_paths(paths, block)["e"])


# registry -------------------------------------------------------------------------
#
# atoms (F = int_0^T g(gamma_s) ds unless noted):
#   constant:c | linear-coordinate:i | tanh-coordinate:i | ambient-height:v0,v1,..
#   gaussian-bump:c0,..,cA,width | test-function
# combinators (arguments separated by ';'):
#   window(a;b;ATOM) affine(a;b;F) exp(eps;F) sin(F) cos(F) tanh(F) square(F)
#   product(F;G) sum(F;G;..)     plus the alias product:A*B

from . import functions as _fn  # noqa: E402


def _split_args(body: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise UsageError(f"unbalanced ')' in {body!r}")
        if ch == ";" and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if depth:
        raise UsageError(f"unbalanced '(' in {body!r}")
    out.append("".join(cur).strip())
    return out


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad numeric list {text!r} for {what}") from None


def _atom_site(M, name: str, arg: str | None) -> _fn.SiteFunction:
    if name in ("linear-coordinate", "tanh-coordinate"):
        try:
            i = int(arg) if arg else 0
        except ValueError:
            raise UsageError(f"{name} needs an integer index, got {arg!r}") from None
        if not 0 <= i < M.ambient_dim:
            raise UsageError(f"{name}:{i} out of range for {M.id}")
        return (_fn.coordinate if name == "linear-coordinate" else _fn.tanh_coordinate)(M, i)
    if name == "ambient-height":
        v = _floats(arg or "", name)
        if len(v) != M.ambient_dim:
            raise UsageError(f"ambient-height needs {M.ambient_dim} components on {M.id}")
        return _fn.height(M, v)
    if name == "gaussian-bump":
        v = _floats(arg or "", name)
        if len(v) != M.ambient_dim + 1:
            raise UsageError(f"gaussian-bump needs {M.ambient_dim} center components and a width")
        if v[-1] <= 0:
            raise UsageError("gaussian-bump width must be positive")
        try:
            return _fn.bump(M, v[:-1], v[-1])
        except Exception as exc:
            raise UsageError(f"gaussian-bump center: {exc}") from None
    if name == "test-function":
        return _fn.test_function(M, M.base())
    raise UsageError(f"unknown registry function {name!r}")


def _unary(F: CylinderFunction, f, df, name: str) -> CylinderFunction:
    return CylinderFunction(F.integrands, lambda y: f(F.outer(y)),
                            lambda y: df(F.outer(y))[:, None] * F.outer_grad(y), name)


def _combine(parts: Sequence[CylinderFunction], f, df, name: str) -> CylinderFunction:
    """``f(F_1, .., F_k)`` with ``df`` returning the list of partials."""
    sizes = np.cumsum([0] + [p.m for p in parts])
    integrands = tuple(g for p in parts for g in p.integrands)

    def vals(y):
        return [p.outer(y[:, sizes[i]:sizes[i + 1]]) for i, p in enumerate(parts)]

    def outer_grad(y):
        v = vals(y)
        d = df(v)
        cols = [d[i][:, None] * p.outer_grad(y[:, sizes[i]:sizes[i + 1]]) for i, p in enumerate(parts)]
        return np.concatenate(cols, axis=1) if cols else np.zeros((y.shape[0], 0))

    return CylinderFunction(integrands, lambda y: f(vals(y)), outer_grad, name)


def constant_function(c: float, name: str | None = None) -> CylinderFunction:
    c = float(c)
    return CylinderFunction((), lambda y: np.full(y.shape[0], c), lambda y: np.zeros((y.shape[0], 0)),
                            name or f"constant:{c:g}")


def _parse(M, T: float, text: str) -> CylinderFunction:
    text = text.strip()
    if not text:
        raise UsageError("empty registry expression")
    if text.startswith("product:"):
        parts = [p for p in text[len("product:"):].split("*")]
        if len(parts) < 2:
            raise UsageError(f"product alias needs at least two factors: {text!r}")
        return _parse(M, T, "product(" + ";".join(parts) + ")")
    if "(" in text:
        head, _, rest = text.partition("(")
        if not rest.endswith(")"):
            raise UsageError(f"missing ')' in {text!r}")
        head = head.strip()
        args = _split_args(rest[:-1])
        return _combinator(M, T, head, args, text)
    name, _, arg = text.partition(":")
    if name == "constant":
        return constant_function(_floats(arg, name)[0] if arg else 1.0, text)
    site = _atom_site(M, name, arg or None)
    return linear([Integrand(site)], name=text)


def _numeric(args, k, head):
    try:
        return [float(a) for a in args[:k]]
    except ValueError:
        raise UsageError(f"{head} expects {k} numeric leading arguments, got {args[:k]}") from None


def _arity(head, args, k):
    if len(args) != k:
        raise UsageError(f"{head}(...) takes {k} arguments, got {len(args)}")


def _combinator(M, T, head, args, text) -> CylinderFunction:
    if head == "window":
        _arity(head, args, 3)
        a, b = _numeric(args, 2, head)
        if not 0 <= a < b <= T + 1e-12:
            raise UsageError(f"window [{a}, {b}] not inside [0, {T}]")
        inner = _parse(M, T, args[2])
        return CylinderFunction(tuple(g.with_window(a, b) for g in inner.integrands),
                                inner.outer, inner.outer_grad, text)
    if head == "affine":
        _arity(head, args, 3)
        a, b = _numeric(args, 2, head)
        F = _parse(M, T, args[2])
        return _unary(F, lambda v: a + b * v, lambda v: np.full_like(v, b), text)
    if head == "exp":
        _arity(head, args, 2)
        (eps,) = _numeric(args, 1, head)
        F = _parse(M, T, args[1])
        return _unary(F, lambda v: np.exp(eps * v), lambda v: eps * np.exp(eps * v), text)
    unary = {
        "sin": (np.sin, np.cos),
        "cos": (np.cos, lambda v: -np.sin(v)),
        "tanh": (np.tanh, lambda v: 1.0 / np.cosh(v) ** 2),
        "square": (np.square, lambda v: 2.0 * v),
    }
    if head in unary:
        _arity(head, args, 1)
        f, df = unary[head]
        return _unary(_parse(M, T, args[0]), f, df, text)
    if head == "product":
        if len(args) < 2:
            raise UsageError("product(...) needs at least two factors")
        parts = [_parse(M, T, a) for a in args]

        def prod_grad(v):
            out = []
            for i in range(len(v)):
                acc = np.ones_like(v[0])
                for j, vj in enumerate(v):
                    if j != i:
                        acc = acc * vj
                out.append(acc)
            return out

        return _combine(parts, lambda v: np.prod(np.stack(v), axis=0), prod_grad, text)
    if head == "sum":
        if len(args) < 1:
            raise UsageError("sum(...) needs at least one term")
        parts = [_parse(M, T, a) for a in args]
        return _combine(parts, lambda v: np.sum(np.stack(v), axis=0),
                        lambda v: [np.ones_like(x) for x in v], text)
    raise UsageError(f"unknown registry combinator {head!r}")


def build(M, text: str, T: float = 1.0) -> CylinderFunction:
    """Build a cylinder function on ``M`` with horizon ``T`` from a registry expression."""
    from .geometry import get_manifold

    return _parse(get_manifold(M), float(T), text)


def default_suite(M, T: float = 1.0) -> list[str]:
    """Registry expressions used by the inequality suites: a constant and 24 smooth functions.

    On hyperbolic space the ambient coordinates are unbounded, so only bounded
    sites (tanh-coordinates and bumps) enter there.
    """
    from .geometry import get_manifold

    M = get_manifold(M)
    A = M.ambient_dim
    o = M.base_point()
    e = lambda i: ",".join("1" if j == i else "0" for j in range(A))  # noqa: E731
    centre = ",".join(f"{c:g}" for c in o)
    if M.kind == "sphere":
        # a second centre a quarter-turn from o
        c2 = np.zeros(A)
        c2[0], c2[-1] = np.sin(0.5), np.cos(0.5)
        off = ",".join(f"{c:.12g}" for c in c2)
    elif M.kind == "hyperbolic":
        c2 = np.zeros(A)
        c2[0], c2[-1] = np.sinh(0.5), np.cosh(0.5)
        off = ",".join(f"{c:.12g}" for c in c2)
    else:
        c2 = np.zeros(A)
        c2[0] = 0.5
        off = ",".join(f"{c:g}" for c in c2)
    h = T / 2
    if M.kind == "hyperbolic":
        a0, a1 = "tanh-coordinate:0", "tanh-coordinate:1"
    else:
        a0, a1 = "linear-coordinate:0", "linear-coordinate:1"
    b0 = f"gaussian-bump:{centre},1"
    b1 = f"gaussian-bump:{off},0.7"
    t0 = "tanh-coordinate:0"
    suite = [
        "constant:1",
        f"affine(1;0.1;{a0})",
        f"affine(1;0.5;{a1})",
        a0,
        a1,
        f"sin({a0})",
        f"cos({a1})",
        f"tanh(affine(0;2;{a0}))",
        f"square({a0})",
        f"exp(0.5;{a0})",
        f"exp(-1;{a1})",
        b0,
        b1,
        f"affine(0.2;1;{b1})",
        f"window(0;{h:g};{a0})",
        f"window({h:g};{T:g};{a1})",
        f"affine(1;0.3;window({h:g};{T:g};{a0}))",
        f"product({a0};{a1})",
        f"product(affine(1;0.5;{a0});{b0})",
        f"sum({a0};{b1})",
        f"sin(sum({a0};{a1}))",
        f"exp(0.3;sum({t0};window(0;{h:g};{a1})))",
        f"cos(affine(0;3;{b0}))",
        f"square(affine(1;1;{t0}))",
        "test-function",
    ]
    if M.kind == "sphere":
        suite[3] = f"ambient-height:{e(0)}"
    return suite
