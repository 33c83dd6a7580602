"""Lattice stochastic heat equation with values in a manifold.

The string ``s -> u(s)``, ``s in [0, 1]``, is discretised on ``N`` cells of width
``h = 1/N``.  ``based-path`` lattices carry sites ``s_k = k h, k = 0..N`` with
``u_0`` pinned at the base point and a free (Neumann) right end; ``loop``
lattices carry ``N`` periodic sites.

Time stepping is explicit Euler-Maruyama in ambient coordinates,

    u_k <- project( u_k + P_{u_k}( phi dt Lap_h u_k + dt xi_k ) ),

with ``Lap_h`` the second difference (one-sided ghost-node form ``2 (u_{N-1} - u_N) / h^2``
at the free end), ``P`` the tangent projection and ``xi_k`` ambient white noise of
variance ``2 phi / (q_k dt)`` per coordinate, ``q_k`` the trapezoid weight of site
``k``.  On the flat model this is a discretised Langevin dynamics for the
Gibbs density ``exp(-(1/(2h)) sum (u_{k+1} - u_k)^2)`` of discrete Brownian
motion; ``phi = 1/2`` (the default ``speed``) is the process generated by the
Dirichlet form ``1/2 int |DF|_H^2``, ``phi = 1`` makes the drift exactly ``Lap_h u``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from . import _rng
from ._stats import Estimate
from .cylinder import CylinderFunction
from .exceptions import StepSizeError, UsageError
from .geometry import Manifold, get_manifold
from .hbm import sample_path
from .quadrature import trapezoid_weights

TOPOLOGIES = ("based-path", "loop")
NOISE_CHUNK = 512
TUBE = 0.5
REPORT_SCHEMA = "pathspace.she-report/1"


@dataclass(frozen=True)
class Lattice:
    manifold: Manifold
    N: int
    topology: str = "based-path"
    speed: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "manifold", get_manifold(self.manifold))
        if int(self.N) != self.N or self.N < 2:
            raise UsageError("N must be an integer >= 2")
        if self.topology not in TOPOLOGIES:
            raise UsageError(f"topology must be one of {TOPOLOGIES}")
        if not self.speed > 0:
            raise UsageError("speed must be positive")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def pinned(self) -> bool:
        return self.topology == "based-path"

    @property
    def n_sites(self) -> int:
        return self.N + 1 if self.pinned else self.N

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.n_sites) * self.h

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weight ``q_k`` of each site."""
        if self.pinned:
            return trapezoid_weights(self.sites)
        return np.full(self.N, self.h)

    @property
    def free(self) -> np.ndarray:
        """Indices of the sites that move."""
        return np.arange(1, self.n_sites) if self.pinned else np.arange(self.n_sites)

    @property
    def state_dim(self) -> int:
        return self.manifold.ambient_dim

    @property
    def stability_bound(self) -> float:
        # h^2/4, tightened to h^2/(2 phi) when phi > 2 (spectrum of Lap_h reaches -4/h^2)
        return self.h ** 2 / 4 * min(1.0, 2.0 / self.speed)

    def check_dt(self, dt: float):
        if not dt > 0:
            raise UsageError("dt must be positive")
        if dt > self.stability_bound * (1 + 1e-12):
            raise StepSizeError(f"dt={dt:g} exceeds the explicit stability bound {self.stability_bound:g}")

    def noise_std(self, dt: float) -> np.ndarray:
        """Standard deviation of ``dt * xi_k`` per ambient coordinate (0 at the pinned site)."""
        sd = np.sqrt(2.0 * self.speed * dt / self.weights)
        if self.pinned:
            sd[0] = 0.0
        return sd

    def to_dict(self) -> dict:
        return {"manifold": self.manifold.id, "N": self.N, "topology": self.topology, "speed": self.speed}


@dataclass
class LatticeField:
    """Replicated lattice state ``u`` of shape ``(R, n_sites, ambient_dim)``."""

    lattice: Lattice
    u: np.ndarray
    t: float = 0.0
    step_index: int = 0

    @property
    def replicas(self) -> int:
        return self.u.shape[0]

    def copy(self) -> "LatticeField":
        return LatticeField(self.lattice, self.u.copy(), self.t, self.step_index)

    def residual(self) -> float:
        M = self.lattice.manifold
        if M.ambient_dim == M.dim:
            return 0.0
        return float(np.max(np.abs(M.residual(self.u))))


def initial_field(lattice: Lattice, replicas: int = 1, init: str = "base", seed: int = 0,
                  dt: float | None = None, first_replica: int = 0) -> LatticeField:
    """``init="base"``: every site at the base point (a constant field).
    ``init="stationary"``: flat lattices draw from the exact invariant Gaussian of the
    scheme at ``dt`` (continuous time if None); curved based-path lattices draw
    Brownian paths sampled at the lattice sites."""
    M = lattice.manifold
    u = np.broadcast_to(M.base_point(), (replicas, lattice.n_sites, M.ambient_dim)).copy()
    if init == "base":
        return LatticeField(lattice, u)
    if init != "stationary":
        raise UsageError(f"unknown init {init!r}")
    if M.ambient_dim == M.dim:
        cov = invariant_covariance_flat(lattice.N, lattice.topology, dt, lattice.speed)
        w, V = np.linalg.eigh(cov)
        root = V * np.sqrt(np.clip(w, 0.0, None))
        z = _rng.block_normals(seed, f"she-init:{lattice.N}:{lattice.topology}", first_replica, replicas,
                               (cov.shape[0], M.dim))
        u[:, lattice.free] = np.einsum("ij,rjd->rid", root, z)
        return LatticeField(lattice, u)
    if not lattice.pinned:
        raise UsageError("stationary initialisation of curved loops is not available")
    p = sample_path(M, None, 1.0, lattice.N, seed, replicas, start=first_replica)
    return LatticeField(lattice, np.ascontiguousarray(p.points))


# ----------------------------------------------------------------------------------
# noise and stepping
# ----------------------------------------------------------------------------------

def _noise_tag(lattice: Lattice) -> str:
    return f"she:{lattice.manifold.id}:{lattice.topology}:{lattice.N}"


def standard_noise(lattice: Lattice, seed: int, replicas: int, step0: int, n_steps: int,
                   first_replica: int = 0) -> np.ndarray:
    """Standard normals ``(R, n_steps, n_sites, A)`` for absolute steps ``step0..``.

    Stream ``(seed, tag, replica, chunk)`` covers steps ``chunk*NOISE_CHUNK ..``,
    so every (replica, step, site) draw is fixed independently of how a run is
    split into calls or across workers.
    """
    S, A = lattice.n_sites, lattice.state_dim
    out = np.empty((replicas, n_steps, S, A))
    t = _rng.tag(_noise_tag(lattice))
    for r in range(replicas):
        i = step0
        while i < step0 + n_steps:
            c = i // NOISE_CHUNK
            lo = i - c * NOISE_CHUNK
            hi = min(NOISE_CHUNK, step0 + n_steps - c * NOISE_CHUNK)
            z = _rng.stream(seed, t, first_replica + r, c).standard_normal((NOISE_CHUNK, S, A))
            out[r, i - step0:i - step0 + hi - lo] = z[lo:hi]
            i = c * NOISE_CHUNK + hi
    return out


def noise(lattice: Lattice, dt: float, seed: int, replicas: int = 1, step0: int = 0, n_steps: int = 1,
          scale: float = 1.0) -> np.ndarray:
    """White-noise values ``xi`` (variance ``2 phi / (q_k dt)``, ``1/(h dt)`` in the bulk at
    ``phi = 1/2``); the pinned site gets 0."""
    sd = lattice.noise_std(dt) / dt * scale
    return standard_noise(lattice, seed, replicas, step0, n_steps) * sd[None, None, :, None]


def laplacian(lattice: Lattice, u: np.ndarray) -> np.ndarray:
    """Discrete second difference ``Lap_h u`` along the site axis (-2)."""
    h2 = lattice.h ** 2
    out = np.zeros_like(u)
    if lattice.pinned:
        out[..., 1:-1, :] = (u[..., :-2, :] + u[..., 2:, :] - 2 * u[..., 1:-1, :]) / h2
        out[..., -1, :] = 2 * (u[..., -2, :] - u[..., -1, :]) / h2
    else:
        out = (np.roll(u, 1, axis=-2) + np.roll(u, -1, axis=-2) - 2 * u) / h2
    return out


def step(field: LatticeField, dt: float, xi: np.ndarray) -> LatticeField:
    """One explicit step with noise values ``xi`` (shape of ``field.u``); reference implementation."""
    lat = field.lattice
    M = lat.manifold
    lat.check_dt(dt)
    incr = lat.speed * dt * laplacian(lat, field.u) + dt * xi
    if lat.pinned:
        incr[..., 0, :] = 0.0
    if M.ambient_dim == M.dim:
        u = field.u + incr
    else:
        u = field.u + M.tangent_project(field.u, incr)
        res = np.abs(M.residual(u))
        if np.any(~(res < TUBE)):
            raise StepSizeError(f"lattice left the projection tube (residual {np.nanmax(res):.3g}); reduce dt")
        u = u / np.sqrt(np.abs(M.inner(u, u)))[..., None]
        if lat.pinned:
            u[..., 0, :] = field.u[..., 0, :]
    return LatticeField(lat, u, field.t + dt, field.step_index + 1)


def advance(field: LatticeField, dt: float, n_steps: int, seed: int, thin: int = 1,
            noise_scale: float = 1.0, first_replica: int = 0):
    """Generator over chunks: advance ``field`` in place, yielding ``(times, snapshots)`` with
    snapshots ``(R, n, S, A)`` after every ``thin``-th absolute step."""
    lat = field.lattice
    M = lat.manifold
    lat.check_dt(dt)
    if thin < 1:
        raise UsageError("thin must be >= 1")
    from ._kernels import lattice_steps

    sd = lat.noise_std(dt) * noise_scale
    embedded = M.ambient_dim > M.dim
    stats_ = {"pre_residual": 0.0, "post_residual": 0.0}
    done = 0
    while done < n_steps:
        s0 = field.step_index
        # stop at chunk boundaries so noise generation matches the stream layout
        count = min(n_steps - done, NOISE_CHUNK - s0 % NOISE_CHUNK)
        dxi = standard_noise(lat, seed, field.replicas, s0, count, first_replica) * sd[None, None, :, None]
        snaps, pre, post, ok = lattice_steps(field.u, dxi, dt, lat.speed, lat.h, lat.pinned, not lat.pinned,
                                             embedded, M.signature, float(M.sectional), thin, s0, TUBE)
        if not ok:
            raise StepSizeError(f"lattice left the projection tube near step {s0}; reduce dt (h^2/4={lat.stability_bound:g})")
        stats_["pre_residual"] = max(stats_["pre_residual"], pre)
        stats_["post_residual"] = max(stats_["post_residual"], post)
        field.step_index += count
        field.t = field.step_index * dt
        done += count
        if snaps.shape[1]:
            first = s0 + (thin - s0 % thin)
            times = dt * (first + thin * np.arange(snaps.shape[1]))
            yield times, snaps, stats_


@dataclass
class Trajectory:
    lattice: Lattice
    dt: float
    seed: int
    times: np.ndarray  # (n,)
    snapshots: np.ndarray  # (R, n, S, A)
    meta: dict = field(default_factory=dict)

    @property
    def replicas(self) -> int:
        return self.snapshots.shape[0]

    @property
    def thin(self) -> int:
        if self.times.size < 2:
            return 1
        return int(round((self.times[1] - self.times[0]) / self.dt))


def _replica_groups(replicas: int, workers: int | None):
    from .hbm import default_workers

    w = min(replicas, workers or default_workers())
    edges = np.linspace(0, replicas, w + 1).astype(int)
    return [(int(a), int(b - a)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_groups(fn, groups):
    """``fn(first, count)`` over replica groups, on threads when there are several."""
    if len(groups) == 1:
        return [fn(*groups[0])]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(len(groups)) as pool:
        return list(pool.map(lambda g: fn(*g), groups))


def simulate(lattice: Lattice, dt: float, n_steps: int, seed: int = 0, replicas: int = 1, thin: int = 1,
             init: str = "base", noise_scale: float = 1.0, field_: LatticeField | None = None,
             workers: int | None = None) -> Trajectory:
    """Run ``n_steps`` steps and keep every ``thin``-th state (the initial state included).

    Replicas are independent streams, so splitting them over ``workers`` threads
    leaves every number unchanged.
    """
    R = replicas if field_ is None else field_.replicas

    def run(first, count):
        if field_ is None:
            f = initial_field(lattice, count, init, seed, dt, first)
        else:
            f = LatticeField(lattice, field_.u[first:first + count].copy(), field_.t, field_.step_index)
        times = [np.array([f.t])]
        snaps = [f.u[:, None].copy()]
        last = {}
        for t, s, st in advance(f, dt, n_steps, seed, thin, noise_scale, first):
            times.append(t)
            snaps.append(s)
            last = dict(st)
        return np.concatenate(times), np.concatenate(snaps, axis=1), last

    parts = _run_groups(run, _replica_groups(R, workers))
    last = {}
    for _, _, st in parts:
        for k, v in st.items():
            last[k] = max(last.get(k, 0.0), v)
    return Trajectory(lattice, dt, seed, parts[0][0], np.concatenate([p[1] for p in parts], axis=0),
                      {"noise_scale": noise_scale, "init": init, "n_steps": n_steps, "thin": thin, **last})


# ----------------------------------------------------------------------------------
# flat-case linear algebra
# ----------------------------------------------------------------------------------

def drift_matrix(N: int, topology: str = "based-path", speed: float = 0.5) -> np.ndarray:
    """``B`` with ``d u_free = B u_free dt + noise`` on the flat lattice."""
    lat = Lattice("flat:1", N, topology, speed)
    S = lat.n_sites
    L = laplacian(lat, np.eye(S)[:, :, None])[:, :, 0].T  # column j = Lap of e_j
    free = lat.free
    return speed * L[np.ix_(free, free)]


def linear_update(N: int, dt: float, topology: str = "based-path", speed: float = 0.5):
    """``(A, var)`` with one flat step ``u' = A u + sqrt(var) * eta`` on the free sites."""
    lat = Lattice("flat:1", N, topology, speed)
    B = drift_matrix(N, topology, speed)
    return np.eye(B.shape[0]) + dt * B, lat.noise_std(dt)[lat.free] ** 2


def invariant_covariance_flat(N: int, topology: str = "based-path", dt: float | None = None,
                              speed: float = 0.5) -> np.ndarray:
    """Stationary covariance of the flat lattice on its free sites (per ambient coordinate).

    ``dt=None`` solves the continuous-time equation ``B S + S B^T + D = 0``; a
    number solves the discrete equation ``S = A S A^T + D dt`` of the explicit
    scheme.  The loop lattice has a free zero mode (the mean), so its result is
    the covariance of the mean-centred field.
    """
    lat = Lattice("flat:1", N, topology, speed)
    B = drift_matrix(N, topology, speed)
    D = np.diag(2.0 * speed / lat.weights[lat.free])
    if topology == "based-path":
        if dt is None:
            return linalg.solve_continuous_lyapunov(B, -D)
        A = np.eye(B.shape[0]) + dt * B
        return linalg.solve_discrete_lyapunov(A, D * dt)
    # loop: B is symmetric with a one-dimensional kernel (constants); drop it
    w, V = np.linalg.eigh(B)
    keep = np.abs(w) > 1e-9 * np.max(np.abs(w))
    sig2 = 2.0 * speed / lat.h
    if dt is None:
        var = sig2 / (-2.0 * w[keep])
    else:
        a = 1.0 + dt * w[keep]
        var = sig2 * dt / (1.0 - a * a)
    Vk = V[:, keep]
    return (Vk * var) @ Vk.T


def spectral_gap(N: int, topology: str = "based-path", speed: float = 0.5) -> float:
    """Smallest nonzero rate ``-lambda`` of ``B``: the slowest relaxation of the flat lattice."""
    B = drift_matrix(N, topology, speed)
    w = np.linalg.eigvals(B).real
    w = w[np.abs(w) > 1e-9 * np.max(np.abs(w))]
    return float(-np.max(w))


# ----------------------------------------------------------------------------------
# functionals of the lattice state
# ----------------------------------------------------------------------------------

def lattice_integrals(F: CylinderFunction, lattice: Lattice, u: np.ndarray) -> np.ndarray:
    out = np.empty(u.shape[:-2] + (F.m,))
    for j, g in enumerate(F.integrands):
        out[..., j] = g.site.value(u) @ g.quad_weights(lattice.sites)
    return out


def lattice_eval(F: CylinderFunction, lattice: Lattice, u: np.ndarray) -> np.ndarray:
    """``F`` with site-trapezoid quadrature, for states ``u`` of shape ``(..., S, A)``."""
    y = lattice_integrals(F, lattice, u)
    lead = y.shape[:-1]
    return F.outer(y.reshape(int(np.prod(lead)), F.m)).reshape(lead)


def _tangent_norm2(M: Manifold, x, c):
    w = M.signature * c
    a = M.inner(x, w)
    if M.ambient_dim == M.dim:
        return np.sum(c * c, axis=-1)
    return M.inner(w, w) - M.sectional * a * a


def lattice_grad_norm2(F: CylinderFunction, lattice: Lattice, u: np.ndarray) -> np.ndarray:
    """``|DF|_H^2 = sum_k q_k |DF(s_k)|^2`` over the moving sites, with
    ``DF(s_k) = sum_j d_j f (w_jk / q_k) grad g_j(u_k)``."""
    M = lattice.manifold
    q = lattice.weights
    y = lattice_integrals(F, lattice, u)
    lead = y.shape[:-1]
    df = F.outer_grad(y.reshape(int(np.prod(lead)), F.m)).reshape(lead + (F.m,))
    cov = np.zeros(u.shape)
    for j, g in enumerate(F.integrands):
        w = g.quad_weights(lattice.sites)
        cov += (df[..., j, None] * w)[..., None] * g.site.covector(u)
    n2 = _tangent_norm2(M, u, cov)  # |sum_j d_j f w_jk grad g_j|^2
    free = lattice.free
    return np.sum(n2[..., free] / q[free], axis=-1)


# ----------------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class SheReport:
    check: str
    manifold: str
    verdict: str
    details: dict
    gating: bool = True

    @property
    def acceptable(self) -> bool:
        return self.verdict == "holds"

    def to_dict(self) -> dict:
        from .verify import _jsonable

        return {"schema": REPORT_SCHEMA, "check": self.check, "manifold": self.manifold,
                "verdict": self.verdict, "gating": self.gating, "details": _jsonable(self.details)}


def _moments(lattice: Lattice, dt: float, burn_in: int, samples: int, seed: int, replicas: int, thin: int,
             noise_scale: float, init: str, observe, n_batches: int = 4, workers: int | None = None):
    """Run replicas and accumulate ``observe(snapshots) -> (R, n, ...)`` summed per replica and
    per time batch of the sampling window."""

    def run(first, count):
        f = initial_field(lattice, count, init, seed, dt, first)
        for _ in advance(f, dt, burn_in, seed, thin, noise_scale, first):
            pass
        acc = None
        counts = np.zeros(n_batches)
        batch_len = samples / n_batches
        start = f.step_index
        for times, snaps, st in advance(f, dt, samples, seed, thin, noise_scale, first):
            obs = observe(snaps)
            if acc is None:
                acc = np.zeros((n_batches,) + obs.shape[:1] + obs.shape[2:])
            b = np.minimum(((np.rint(times / dt) - start - 1) // batch_len).astype(int), n_batches - 1)
            for i in range(n_batches):
                sel = b == i
                if np.any(sel):
                    acc[i] += obs[:, sel].sum(axis=1)
                    counts[i] += sel.sum()
        return acc / counts.reshape((-1,) + (1,) * (acc.ndim - 1)), f

    parts = _run_groups(run, _replica_groups(replicas, workers))
    acc = np.concatenate([p[0] for p in parts], axis=1)
    f0 = parts[0][1]
    u = np.concatenate([p[1].u for p in parts], axis=0)
    return acc, LatticeField(lattice, u, f0.t, f0.step_index)


def run_invariance_test(M, N: int = 16, dt: float = 1e-4, burn_in: int = 20000, samples: int = 40000,
                        seed: int = 0, replicas: int = 256, thin: int = 10, noise_scale: float = 1.0,
                        topology: str = "based-path", speed: float = 0.5, n_ref: int = 20000,
                        workers: int | None = None) -> SheReport:
    """Stationary statistics of the lattice against the invariant law.

    Flat: per-replica time averages of ``u_j u_k`` (free sites, averaged over
    coordinates) compared entrywise with the discrete Lyapunov covariance;
    *holds* iff every entry is within 3 standard errors (spread across
    replicas).  A drift of the covariance trace between the first and last
    quarter of the sampling window beyond 4 standard errors makes the result
    *inconclusive*.  Curved lattices give diagnostic (non-gating) reports.
    """
    M = get_manifold(M)
    lat = Lattice(M, N, topology, speed)
    lat.check_dt(dt)
    if replicas < 2:
        raise UsageError("need at least two replicas")
    free = lat.free
    if M.ambient_dim == M.dim:
        def observe(s):
            x = s[:, :, free]
            if topology == "loop":
                x = x - x.mean(axis=2, keepdims=True)
            return np.einsum("rnid,rnjd->rnij", x, x) / M.dim

        batches, _ = _moments(lat, dt, burn_in, samples, seed, replicas, thin, noise_scale, "stationary", observe,
                              workers=workers)
        per_rep = batches.mean(axis=0)  # (R, n, n)
        emp = per_rep.mean(axis=0)
        se = per_rep.std(axis=0, ddof=1) / np.sqrt(replicas)
        oracle = invariant_covariance_flat(N, topology, dt, speed)
        z = (emp - oracle) / np.where(se > 0, se, np.inf)
        tr = np.trace(batches, axis1=-2, axis2=-1)  # (batches, R)
        drift = tr[-1] - tr[0]
        z_drift = float(drift.mean() / (drift.std(ddof=1) / np.sqrt(replicas)))
        max_z = float(np.max(np.abs(z)))
        if abs(z_drift) > 4:
            verdict = "inconclusive"
        else:
            verdict = "holds" if max_z <= 3.0 else "violated"
        cont = invariant_covariance_flat(N, topology, None, speed)
        return SheReport("she-invariance", M.id, verdict, {
            "lattice": lat.to_dict(), "dt": dt, "burn_in": burn_in, "samples": samples, "thin": thin,
            "replicas": replicas, "seed": seed, "noise_scale": noise_scale,
            "max_abs_z": max_z, "n_entries": int(emp.size), "drift_z": z_drift,
            "max_abs_diff": float(np.max(np.abs(emp - oracle))),
            "oracle_vs_continuum_max_diff": float(np.max(np.abs(oracle - cont))),
            "empirical": emp, "stderr": se, "oracle": oracle})
    if topology == "loop":
        return _loop_homogeneity(lat, dt, burn_in, seed, replicas, noise_scale, workers=workers)
    return _curved_path_diagnostic(lat, dt, burn_in, samples, seed, replicas, thin, noise_scale, n_ref, workers)


def _curved_path_diagnostic(lat, dt, burn_in, samples, seed, replicas, thin, noise_scale, n_ref, workers=None):
    M = lat.manifold
    o = M.base_point()

    def observe(s):
        d0 = M.distance(s, o)  # (R, n, S)
        d1 = M.distance(s[:, :, 1:], s[:, :, :-1])
        return np.concatenate([d0[..., 1:], d1], axis=-1)

    batches, f = _moments(lat, dt, burn_in, samples, seed, replicas, thin, noise_scale, "stationary", observe,
                          workers=workers)
    per_rep = batches.mean(axis=0)
    emp = per_rep.mean(axis=0)
    se = per_rep.std(axis=0, ddof=1) / np.sqrt(replicas)
    ref_p = sample_path(M, None, 1.0, lat.N, seed + 1, n_ref)
    r0 = M.distance(ref_p.points, o)[:, 1:]
    r1 = M.distance(ref_p.points[:, 1:], ref_p.points[:, :-1])
    ref = np.concatenate([r0, r1], axis=-1)
    ref_mean, ref_se = ref.mean(axis=0), ref.std(axis=0, ddof=1) / np.sqrt(n_ref)
    z = (emp - ref_mean) / np.hypot(se, ref_se)
    verdict = "holds" if np.max(np.abs(z)) <= 3.0 else "violated"
    return SheReport("she-invariance", M.id, verdict, {
        "lattice": lat.to_dict(), "dt": dt, "replicas": replicas, "seed": seed,
        "statistics": "mean distance to o per site, then mean distance between neighbours",
        "empirical": emp, "stderr": se, "reference": ref_mean, "reference_stderr": ref_se,
        "max_abs_z": float(np.max(np.abs(z))), "post_residual": f.residual(),
        "caveat": "fixed-h diagnostic; the lattice law is not claimed to equal the path measure"},
        gating=False)


def _loop_homogeneity(lat, dt, burn_in, seed, replicas, noise_scale, n_bins: int = 8, workers=None):
    """Chi-square homogeneity of the single-site marginals; site ``k`` is read from
    replicas ``r = k mod N`` only, so the table entries are independent."""
    M = lat.manifold
    f = simulate(lat, dt, burn_in, seed, replicas, max(burn_in, 1), "base", noise_scale, workers=workers)
    u = f.snapshots[:, -1]
    S = lat.n_sites
    coord = u[:, :, -1]  # height along the base point axis
    if M.kind == "sphere":
        edges = np.linspace(-1, 1, n_bins + 1)
    else:
        edges = np.quantile(coord, np.linspace(0, 1, n_bins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    table = np.zeros((S, n_bins))
    for k in range(S):
        vals = coord[k::S, k] if replicas >= S else coord[:, k]
        table[k] = np.histogram(vals, edges)[0]
    table = table[:, table.sum(axis=0) > 0]
    chi2, p, dof, _ = stats.chi2_contingency(table)
    verdict = "holds" if p > 0.01 else "violated"
    return SheReport("she-loop-homogeneity", M.id, verdict, {
        "lattice": lat.to_dict(), "dt": dt, "burn_in": burn_in, "replicas": replicas, "seed": seed,
        "chi2": float(chi2), "dof": int(dof), "p_value": float(p), "table": table,
        "post_residual": float(np.max(np.abs(M.residual(u))))}, gating=False)


def qv_check(F: CylinderFunction, traj: Trajectory, window: tuple[float, float] | None = None,
             rtol: float = 0.05, continuum_rate: float | None = None) -> SheReport:
    """Realized quadratic variation of ``F(X_t)`` against ``int 2 phi |DF|_H^2 dt``.

    The sum of squared increments runs over consecutive snapshots inside
    ``window``; the compensator integrates the lattice ``|DF|_H^2`` by the
    trapezoid rule on the same snapshots.  ``rtol`` is the relative-error
    tolerance of the verdict.
    """
    lat = traj.lattice
    t = traj.times
    a, b = (t[0], t[-1]) if window is None else window
    sel = (t >= a - 1e-12) & (t <= b + 1e-12)
    idx = np.flatnonzero(sel)
    if idx.size < 2 or (idx[-1] - idx[0]) * traj.thin < 100:
        raise UsageError("quadratic-variation window must span at least 100 steps")
    X = traj.snapshots[:, idx]
    Fv = lattice_eval(F, lat, X)  # (R, n)
    realized = np.sum(np.diff(Fv, axis=1) ** 2, axis=1)
    rate = 2.0 * lat.speed * lattice_grad_norm2(F, lat, X) if F.m else np.zeros_like(Fv)
    expected = rate @ trapezoid_weights(t[idx])
    R = realized.size
    real = Estimate.from_samples(realized) if R > 1 else Estimate(float(realized[0]), float("nan"), 1)
    exp_ = Estimate.from_samples(expected) if R > 1 else Estimate(float(expected[0]), float("nan"), 1)
    duration = float(t[idx[-1]] - t[idx[0]])
    if exp_.value == 0:
        rel = 0.0 if real.value == 0 else float("inf")
    else:
        rel = real.value / exp_.value - 1.0
    verdict = "holds" if abs(rel) <= rtol else "violated"
    det = {"lattice": lat.to_dict(), "window": [float(t[idx[0]]), float(t[idx[-1]])],
           "increments": int(idx.size - 1), "realized": real, "compensator": exp_, "relative_error": rel,
           "realized_rate": real.value / duration, "compensator_rate": exp_.value / duration,
           "rtol": rtol, "function": F.name}
    if continuum_rate is not None:
        det["continuum_rate"] = continuum_rate
        det["relative_error_vs_continuum"] = (real.value / duration / continuum_rate - 1.0
                                              if continuum_rate else float("nan"))
    return SheReport("she-qv", lat.manifold.id, verdict, det)


def ergodic_average(F: CylinderFunction, traj: Trajectory, reference: float | None = None,
                    n_ref: int = 100_000, ref_seed: int = 12345) -> tuple[np.ndarray, SheReport]:
    """Running time averages ``(1/t) int_0^t F(X_s) ds`` (per replica) and a convergence report.

    The long-run average pools replicas; its standard error is the spread of
    the independent per-replica averages (batch means with one batch per
    replica; with a single replica, 20 time batches).  Without ``reference``
    the target is estimated from ``n_ref`` independent Brownian paths sampled
    at the lattice sites.
    """
    lat = traj.lattice
    Fv = lattice_eval(F, lat, traj.snapshots)  # (R, n)
    t = traj.times - traj.times[0]
    cum = np.concatenate([np.zeros((Fv.shape[0], 1)),
                          np.cumsum((Fv[:, 1:] + Fv[:, :-1]) / 2 * np.diff(t), axis=1)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        running = np.where(t > 0, cum / np.where(t > 0, t, 1.0), Fv[:, :1])
    per_rep = running[:, -1]
    if per_rep.size > 1:
        avg = Estimate.from_samples(per_rep)
    else:
        nb = 20
        k = (Fv.shape[1] - 1) // nb
        means = Fv[0, 1:1 + nb * k].reshape(nb, k).mean(axis=1)
        avg = Estimate(float(per_rep[0]), float(means.std(ddof=1) / np.sqrt(nb)), nb)
    half = Fv.shape[1] // 2
    h1, h2 = Fv[:, :half].mean(axis=1), Fv[:, half:].mean(axis=1)
    if reference is None:
        if lat.topology != "based-path":
            raise UsageError("reference expectations from Brownian paths need a based-path lattice")
        p = sample_path(lat.manifold, None, 1.0, lat.N, ref_seed, n_ref)
        ref = Estimate.from_samples(lattice_eval(F, lat, p.points))
    else:
        ref = Estimate(float(reference), 0.0, 0)
    tol = 3.0 * float(np.hypot(avg.stderr, ref.stderr))
    diff = avg.value - ref.value
    verdict = "holds" if abs(diff) <= max(tol, 1e-12) else "violated"
    det = {"average": avg, "reference": ref, "difference": diff, "tolerance": tol,
           "duration": float(t[-1]), "replicas": traj.replicas, "function": F.name,
           "halves": [float(h1.mean()), float(h2.mean())],
           "halves_diff_z": float((h1 - h2).mean() / ((h1 - h2).std(ddof=1) / np.sqrt(h1.size)))
           if h1.size > 1 and np.std(h1 - h2) > 0 else 0.0}
    return running, SheReport("she-ergodic", lat.manifold.id, verdict, det)


def autocovariance(Fv: np.ndarray, max_lag: int, mean: float | None = None) -> np.ndarray:
    """Per-replica autocovariances ``(R, max_lag+1)`` of series ``Fv`` (R, n)."""
    m = Fv.mean() if mean is None else mean
    x = Fv - m
    n = x.shape[1]
    if max_lag >= n:
        raise UsageError("max_lag must be shorter than the series")
    return np.stack([np.mean(x[:, : n - k] * x[:, k:], axis=1) for k in range(max_lag + 1)], axis=1)


def decay_check(F: CylinderFunction, traj: Trajectory, K: float = 0.0, max_time: float = 2.0) -> SheReport:
    """``||P_t F - mu(F)||^2 <= e^{-t/C(K)} ||F - mu(F)||^2`` on stationary replicas.

    By reversibility ``||P_t F||^2 = rho_F(2t)`` with ``rho_F`` the stationary
    autocovariance, so the check is ``rho_F(2t) <= rho_F(0) e^{-t/C(K)}`` for
    ``t`` in ``[0, max_time]``.  Per-lag margins are paired per replica.
    *violated* if some margin is below ``-3`` standard errors, *holds* if none
    is and the decay is resolved (some margin above 3 standard errors),
    otherwise *inconclusive* (noise floor).
    """
    from .constants import c_of_k

    lat = traj.lattice
    if traj.replicas < 2:
        raise UsageError("decay_check needs at least two stationary replicas")
    Fv = lattice_eval(F, lat, traj.snapshots)
    dts = traj.dt * traj.thin
    max_lag = int(round(2 * max_time / dts))
    rho = autocovariance(Fv, max_lag)  # (R, L)
    C = c_of_k(K)
    lags = dts * np.arange(max_lag + 1)
    t = lags / 2  # semigroup time
    env = np.exp(-t / C)
    margins = rho[:, :1] * env - rho  # (R, L)
    m = margins.mean(axis=0)
    se = margins.std(axis=0, ddof=1) / np.sqrt(traj.replicas)
    viol = m < -3 * se
    resolved = m[1:] > 3 * se[1:]
    rho0 = rho[:, 0].mean()
    if rho0 <= 1e-300:
        verdict = "holds"
    elif np.any(viol):
        verdict = "violated"
    elif np.any(resolved):
        verdict = "holds"
    else:
        verdict = "inconclusive"
    literal = rho[:, :1] * np.exp(-lags / C) - rho
    lit_m = literal.mean(axis=0)
    lit_se = literal.std(axis=0, ddof=1) / np.sqrt(traj.replicas)
    det = {"K": K, "C": C, "lags": lags, "rho": rho.mean(axis=0), "rho_stderr": rho.std(axis=0, ddof=1) / np.sqrt(traj.replicas),
           "semigroup_time": t, "envelope": rho0 * env, "margin_z_min": float(np.min(m[1:] / np.where(se[1:] > 0, se[1:], np.inf))) if max_lag else 0.0,
           "n_violations": int(viol.sum()),
           "literal_autocovariance_form_violations": int(np.sum(lit_m < -3 * lit_se)),
           "caveat": "the bound concerns the continuum semigroup; here it is checked on the lattice dynamics at fixed h and dt"}
    if lat.manifold.ambient_dim == lat.manifold.dim:
        det["lattice_gap"] = spectral_gap(lat.N, lat.topology, lat.speed)
        det["envelope_rate_on_rho"] = 1.0 / (2 * C)
    return SheReport("she-decay", lat.manifold.id, verdict, det)


# ----------------------------------------------------------------------------------
# trajectory files
# ----------------------------------------------------------------------------------

TRAJ_MAGIC = b"SHET"
TRAJ_VERSION = 1


def write_trajectory(fh, traj: Trajectory):
    """``magic | u32 version | u32 header_len | JSON header | times | snapshots`` (little-endian f64)."""
    R, n, S, A = traj.snapshots.shape
    header = {**traj.lattice.to_dict(), "dt": traj.dt, "seed": traj.seed, "replicas": R, "n_snapshots": n,
              "n_sites": S, "ambient_dim": A, "meta": traj.meta}
    from .verify import _jsonable

    blob = json.dumps(_jsonable(header), sort_keys=True).encode()
    fh.write(TRAJ_MAGIC + struct.pack("<II", TRAJ_VERSION, len(blob)) + blob)
    fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(traj.snapshots, dtype="<f8").tobytes())


def read_trajectory(fh) -> Trajectory:
    if fh.read(4) != TRAJ_MAGIC:
        raise UsageError("not a trajectory file (bad magic)")
    version, n = struct.unpack("<II", fh.read(8))
    if version != TRAJ_VERSION:
        raise UsageError(f"unsupported trajectory version {version}")
    h = json.loads(fh.read(n))
    lat = Lattice(h["manifold"], h["N"], h["topology"], h["speed"])
    R, ns, S, A = h["replicas"], h["n_snapshots"], h["n_sites"], h["ambient_dim"]
    times = np.frombuffer(fh.read(8 * ns), dtype="<f8").copy()
    snaps = np.frombuffer(fh.read(8 * R * ns * S * A), dtype="<f8").reshape(R, ns, S, A).copy()
    return Trajectory(lat, h["dt"], h["seed"], times, snaps, h.get("meta", {}))
