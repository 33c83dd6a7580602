"""Compiled inner loop of the geodesic scheme for the embedded models.

Mirrors :meth:`Sphere.exp_transport` / :meth:`Hyperbolic.exp_transport` plus
the renormalisation in :func:`pathspace.hbm.step_frames`; the two are kept
in agreement by the test suite.
"""

import math

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def _coefs(r, kappa):
    # returns (c, s, cw): x' = c x + s w ; U' = U + (cw w - kappa s x) (w.U)
    if r < 1e-4:
        r2 = r * r
        return 1.0 - kappa * r2 / 2.0, 1.0 - kappa * r2 / 6.0, -kappa * 0.5 + r2 / 24.0
    if kappa > 0:
        return math.cos(r), math.sin(r) / r, (math.cos(r) - 1.0) / (r * r)
    return math.cosh(r), math.sinh(r) / r, (math.cosh(r) - 1.0) / (r * r)


@nb.njit(cache=True, nogil=True)
def integrate_embedded(x0, U0, inc, sig, kappa, record, tol):
    """Integrate all paths of ``inc`` (P, n, d) from ``(x0, U0)``.

    ``record`` lists the step indices (0..n) whose point/frame are returned.
    Returns ``points (P, R, A)``, ``frames (P, R, A, d)``, ``bad (P,)``.
    """
    P, n, d = inc.shape
    A = x0.shape[0]
    R = record.shape[0]
    points = np.empty((P, R, A))
    frames = np.empty((P, R, A, d))
    bad = np.zeros(P, dtype=np.bool_)
    x = np.empty(A)
    U = np.empty((A, d))
    w = np.empty(A)
    wu = np.empty(d)
    for p in range(P):
        for a in range(A):
            x[a] = x0[a]
            for i in range(d):
                U[a, i] = U0[a, i]
        ri = 0
        if R > 0 and record[0] == 0:
            for a in range(A):
                points[p, 0, a] = x[a]
                for i in range(d):
                    frames[p, 0, a, i] = U[a, i]
            ri = 1
        for k in range(n):
            r2 = 0.0
            for a in range(A):
                acc = 0.0
                for i in range(d):
                    acc += U[a, i] * inc[p, k, i]
                w[a] = acc
                r2 += sig[a] * acc * acc
            for i in range(d):
                acc = 0.0
                for a in range(A):
                    acc += sig[a] * w[a] * U[a, i]
                wu[i] = acc
            r = math.sqrt(r2) if r2 > 0.0 else 0.0
            c, s, cw = _coefs(r, kappa)
            for a in range(A):
                xa = x[a]
                ca = cw * w[a] - kappa * s * xa
                x[a] = c * xa + s * w[a]
                for i in range(d):
                    U[a, i] += ca * wu[i]
            nrm = 0.0
            for a in range(A):
                nrm += sig[a] * x[a] * x[a]
            res = abs(math.sqrt(abs(nrm)) - 1.0)
            if not res < tol:
                bad[p] = True
            nrm = math.sqrt(abs(nrm))
            for a in range(A):
                x[a] /= nrm
            for i in range(d):
                acc = 0.0
                for a in range(A):
                    acc += sig[a] * x[a] * U[a, i]
                for a in range(A):
                    U[a, i] -= kappa * acc * x[a]
            if ri < R and record[ri] == k + 1:
                for a in range(A):
                    points[p, ri, a] = x[a]
                    for i in range(d):
                        frames[p, ri, a, i] = U[a, i]
                ri += 1
    return points, frames, bad


@nb.njit(cache=True, nogil=True)
def lattice_steps(u, dxi, dt, phi, h, pinned, periodic, embedded, sig, kappa, thin, offset, tube):
    """Advance every replica of ``u`` (R, S, A) through ``dxi.shape[1]`` explicit steps.

    ``dxi`` (R, C, S, A) holds the noise increments ``dt * xi`` (pinned site 0).
    Snapshots are taken after steps whose absolute index ``offset + c + 1`` is a
    multiple of ``thin``.  Returns ``(snapshots, max_pre_residual, max_post_residual, ok)``.
    """
    R, S, A = u.shape
    C = dxi.shape[1]
    first = thin - (offset % thin)  # local step count of the first snapshot
    n_snap = 0 if first > C else (C - first) // thin + 1
    snaps = np.empty((R, n_snap, S, A))
    lap = np.empty((S, A))
    inv_h2 = 1.0 / (h * h)
    pre = 0.0
    post = 0.0
    ok = True
    for r in range(R):
        si = 0
        for c in range(C):
            for k in range(S):
                if pinned and k == 0:
                    for a in range(A):
                        lap[k, a] = 0.0
                    continue
                if periodic:
                    km = k - 1 if k > 0 else S - 1
                    kp = k + 1 if k < S - 1 else 0
                    for a in range(A):
                        lap[k, a] = (u[r, km, a] + u[r, kp, a] - 2.0 * u[r, k, a]) * inv_h2
                elif k == S - 1:
                    for a in range(A):
                        lap[k, a] = 2.0 * (u[r, k - 1, a] - u[r, k, a]) * inv_h2
                else:
                    for a in range(A):
                        lap[k, a] = (u[r, k - 1, a] + u[r, k + 1, a] - 2.0 * u[r, k, a]) * inv_h2
            for k in range(S):
                if pinned and k == 0:
                    continue
                if embedded:
                    ip = 0.0
                    for a in range(A):
                        ip += sig[a] * u[r, k, a] * (phi * dt * lap[k, a] + dxi[r, c, k, a])
                    nrm = 0.0
                    for a in range(A):
                        v = phi * dt * lap[k, a] + dxi[r, c, k, a] - kappa * ip * u[r, k, a]
                        u[r, k, a] += v
                        nrm += sig[a] * u[r, k, a] * u[r, k, a]
                    res = abs(math.sqrt(abs(nrm)) - 1.0)
                    if res > pre:
                        pre = res
                    if not res < tube or (kappa < 0 and not nrm < 0):
                        ok = False
                    nrm = math.sqrt(abs(nrm))
                    nrm2 = 0.0
                    for a in range(A):
                        u[r, k, a] /= nrm
                        nrm2 += sig[a] * u[r, k, a] * u[r, k, a]
                    res = abs(math.sqrt(abs(nrm2)) - 1.0)
                    if res > post:
                        post = res
                else:
                    for a in range(A):
                        u[r, k, a] += phi * dt * lap[k, a] + dxi[r, c, k, a]
            if c + 1 >= first and (c + 1 - first) % thin == 0 and si < n_snap:
                for k in range(S):
                    for a in range(A):
                        snaps[r, si, k, a] = u[r, k, a]
                si += 1
    return snaps, pre, post, ok
