"""Trapezoid quadrature on (possibly non-uniform) time grids.

All integrals in the package are integrals of the piecewise-linear
interpolant of grid values, so sub-interval integrals split exactly.
"""

from __future__ import annotations

import numpy as np

from .exceptions import UsageError


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    h = np.diff(times)
    w = np.zeros_like(times)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def interval_weights(times: np.ndarray, a: float, b: float) -> np.ndarray:
    """Weights ``w`` with ``w @ v`` equal to the integral over ``[a, b]`` of the
    piecewise-linear interpolant of ``v``.

    ``a`` and ``b`` need not be grid nodes; ``[a, b]`` is clipped to the grid.
    """
    times = np.asarray(times, dtype=float)
    if b < a:
        raise UsageError(f"empty interval [{a}, {b}]")
    w = np.zeros_like(times)
    lo_t, hi_t = times[:-1], times[1:]
    lo = np.clip(a, lo_t, hi_t)
    hi = np.clip(b, lo_t, hi_t)
    h = hi_t - lo_t
    active = hi > lo
    lo, hi, lo_t, hi_t, h = lo[active], hi[active], lo_t[active], hi_t[active], h[active]
    idx = np.flatnonzero(active)
    left = ((hi_t - lo) ** 2 - (hi_t - hi) ** 2) / (2 * h)
    right = ((hi - lo_t) ** 2 - (lo - lo_t) ** 2) / (2 * h)
    np.add.at(w, idx, left)
    np.add.at(w, idx + 1, right)
    return w


def integrate(values: np.ndarray, times: np.ndarray, a: float | None = None, b: float | None = None,
              axis: int = -1) -> np.ndarray:
    """Trapezoid integral of ``values`` along ``axis`` over ``[a, b]``."""
    times = np.asarray(times, dtype=float)
    a = times[0] if a is None else a
    b = times[-1] if b is None else b
    w = interval_weights(times, a, b)
    return np.tensordot(np.moveaxis(values, axis, -1), w, axes=([-1], [0]))


def tail_integrals(values: np.ndarray, times: np.ndarray, axis: int = 0) -> np.ndarray:
    """``I_k = integral from t_k to t_end`` for every node ``k`` (trapezoid)."""
    v = np.moveaxis(values, axis, 0)
    h = np.diff(times).reshape((-1,) + (1,) * (v.ndim - 1))
    pieces = h * (v[:-1] + v[1:]) / 2
    out = np.zeros_like(v)
    out[:-1] = np.cumsum(pieces[::-1], axis=0)[::-1]
    return np.moveaxis(out, 0, axis)


def _segment_moments(times, lo, hi):
    t0, t1 = times[:-1], times[1:]
    h = t1 - t0
    u0 = (np.clip(lo, t0, t1) - t0) / h
    u1 = (np.clip(hi, t0, t1) - t0) / h
    return h * (u1 - u0), h * (u1 ** 2 - u0 ** 2) / 2, h * (u1 ** 3 - u0 ** 3) / 3


def _dot(x, y):
    out = x[..., 0] * y[..., 0]
    for i in range(1, x.shape[-1]):
        out += x[..., i] * y[..., i]
    return out


def product_integral(a: np.ndarray, b: np.ndarray, times: np.ndarray, lo: float | None = None,
                     hi: float | None = None) -> np.ndarray:
    """Exact ``int_lo^hi <A(t), B(t)> dt`` for the piecewise-linear interpolants
    ``A``, ``B`` of node values ``a``, ``b`` of shape ``(..., n+1, d)``.

    This is the L2 inner product of the interpolants (a mass-matrix form); it
    is exact for piecewise-linear integrands such as ``(1 - t) e_1``.
    """
    times = np.asarray(times, dtype=float)
    lo = times[0] if lo is None else lo
    hi = times[-1] if hi is None else hi
    if hi < lo:
        raise UsageError(f"empty interval [{lo}, {hi}]")
    k0, k1, k2 = _segment_moments(times, lo, hi)
    a0, a1 = a[..., :-1, :], a[..., 1:, :]
    b0, b1 = b[..., :-1, :], b[..., 1:, :]
    # A = a0 + u (a1 - a0): expand in node products
    p00, p01, p10, p11 = _dot(a0, b0), _dot(a0, b1), _dot(a1, b0), _dot(a1, b1)
    return (p00 @ (k0 - 2 * k1 + k2) + (p01 + p10) @ (k1 - k2) + p11 @ k2)


def square_weights(times: np.ndarray, lo: float | None = None, hi: float | None = None):
    """Weights ``(ws, wc)`` with ``int_lo^hi |A|^2 = S @ ws + C @ wc`` where
    ``S_k = |a_k|^2`` (n+1 nodes) and ``C_k = <a_k, a_{k+1}>`` (n segments)."""
    times = np.asarray(times, dtype=float)
    lo = times[0] if lo is None else lo
    hi = times[-1] if hi is None else hi
    if hi < lo:
        raise UsageError(f"empty interval [{lo}, {hi}]")
    k0, k1, k2 = _segment_moments(times, lo, hi)
    ws = np.zeros(times.size)
    ws[:-1] += k0 - 2 * k1 + k2
    ws[1:] += k2
    return ws, 2 * (k1 - k2)


def node_products(a: np.ndarray):
    """``(S, C)`` of :func:`square_weights` for node values ``a`` of shape ``(..., n+1, d)``."""
    return _dot(a, a), _dot(a[..., :-1, :], a[..., 1:, :])
