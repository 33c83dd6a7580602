"""Monte Carlo verifiers for path-space functional inequalities and for the
small-time curvature formulas.

Every report compares a left-hand side and a right-hand side estimated on
*one* path set.  The margin ``rhs - lhs`` is an average of per-path terms
(entropies and norms enter through their delta-method influence functions),
so its standard error accounts for the pairing.

Verdict rule: with ``tol = max(3 * stderr + budget, atol)`` a report *holds*
if ``margin > tol``, is *violated* if ``margin < -tol`` and is *inconclusive*
otherwise.  A margin that is exactly zero with zero spread is flagged
``equality=True`` (the case of constant functions).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import constants as _const
from ._stats import Estimate, entropy
from .cylinder import CylinderFunction, build, damped_grad, damping, ek_weights, grad, window_split
from .exceptions import UsageError
from .functions import SiteFunction, test_function
from .geometry import FramePoint, Manifold, geodesic_step, get_manifold
from .hbm import DiscretePath, PathSampler, brownian_increments, integrate_frames, map_paths
from .quadrature import trapezoid_weights

EQUALITY_ATOL = 1e-12
FD_STEP = 1e-3
REPORT_SCHEMA = "pathspace.report/1"

#: prefactor of the energy in the log-Sobolev checks.  "literal" is
#: ``Ent <= 2 * energy`` as stated; "gaussian" is ``Ent <= 4 * energy``, the
#: sharp constant of the Gaussian (flat) case.
LSI_FACTORS = {"literal": 2.0, "gaussian": 4.0}


def decide(margin: float, se: float, budget: float = 0.0, atol: float = EQUALITY_ATOL):
    """Return ``(verdict, tol, equality)``."""
    tol = max(3.0 * se + budget, atol)
    equality = abs(margin) <= atol and se <= atol
    if not np.isfinite(margin) or not np.isfinite(tol):
        return "inconclusive", tol, False
    if margin > tol:
        return "holds", tol, equality
    if margin < -tol:
        return "violated", tol, equality
    return "inconclusive", tol, equality


@dataclass(frozen=True)
class VerificationReport:
    inequality: str
    function: str
    manifold: str
    lhs: Estimate
    rhs: Estimate
    margin: float
    margin_stderr: float
    tolerance: float
    verdict: str
    equality: bool = False
    n_paths: int = 0
    seed: int | None = None
    gating: bool = True
    details: dict = field(default_factory=dict)

    @property
    def z(self) -> float:
        if self.margin_stderr > 0:
            return self.margin / self.margin_stderr
        return 0.0 if self.margin == 0 else float(np.sign(self.margin) * np.inf)

    @property
    def acceptable(self) -> bool:
        """``holds``, or exact equality (constants)."""
        return self.verdict == "holds" or self.equality

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "inequality": self.inequality,
            "function": self.function,
            "manifold": self.manifold,
            "lhs": self.lhs.to_dict(),
            "rhs": self.rhs.to_dict(),
            "margin": self.margin,
            "margin_stderr": self.margin_stderr,
            "z": _finite(self.z),
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            "equality": self.equality,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "gating": self.gating,
            "details": _jsonable(self.details),
        }


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Estimate):
        return obj.to_dict()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _report(ineq, fname, M, lhs_val, lhs_infl, rhs_samples, n, seed, budget=0.0, gating=True,
            details=None) -> VerificationReport:
    rhs_samples = np.asarray(rhs_samples, dtype=float)
    lhs_infl = np.asarray(lhs_infl, dtype=float)
    lhs_se = float(np.std(lhs_infl, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    rhs = Estimate.from_samples(rhs_samples)
    margin = rhs.value - lhs_val
    m_se = float(np.std(rhs_samples - lhs_infl, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    verdict, tol, eq = decide(margin, m_se, budget)
    return VerificationReport(ineq, fname, M.id, Estimate(float(lhs_val), lhs_se, n), rhs, float(margin),
                              m_se, tol, verdict, eq, n, seed, gating, details or {})


def _seed_of(paths):
    return getattr(paths, "seed", None)


def _as_function(M, F, T) -> CylinderFunction:
    if isinstance(F, CylinderFunction):
        return F
    if isinstance(F, str):
        return build(M, F, T)
    raise UsageError(f"expected a CylinderFunction or registry expression, got {type(F).__name__}")


def _check_start(M: Manifold, paths, y):
    if y is None:
        return
    yx = y.x if isinstance(y, FramePoint) else np.asarray(y, dtype=float)
    start = paths.base.x if isinstance(paths, PathSampler) else paths.points[:, 0]
    if np.max(np.abs(np.asarray(start) - yx)) > 1e-12:
        raise UsageError("paths do not start at the requested point y")


def _check_manifold(M: Manifold, paths):
    if paths.manifold != M:
        raise UsageError(f"paths live on {paths.manifold.id}, verifier asked for {M.id}")


# ----------------------------------------------------------------------------------
# inequality suites on a shared path set
# ----------------------------------------------------------------------------------

def suite_samples(M, functions, paths, ns=(1,)) -> dict:
    """Per-path quantities for each cylinder function, in one pass over ``paths``.

    Returns ``{name: {"F", "D2", "Dt2", "head<n>", "tail<n>"}}`` of per-path arrays.
    """
    M = get_manifold(M)
    _check_manifold(M, paths)
    names = [F.name or f"F{i}" for i, F in enumerate(functions)]
    if len(set(names)) != len(names):
        raise UsageError("function names in a suite must be unique")

    def block(p: DiscretePath):
        damp = damping(p)
        out = {}
        for name, F in zip(names, functions):
            DF = grad(F, p)
            T = p.T
            windows = [(0.0, T)] + [w for n in ns for w in ((0.0, window_split(T, n)), (window_split(T, n), T))]
            norms = DF.norm2_windows(windows)
            row = {"F": F(p), "D2": norms[0], "Dt2": damped_grad(F, p, DF, damp).norm2()}
            for i, n in enumerate(ns):
                row[f"head{n}"], row[f"tail{n}"] = norms[1 + 2 * i], norms[2 + 2 * i]
            out[name] = row
        return out

    return map_paths(paths, block)


def reports_from_samples(M, name: str, s: dict, K: float, T: float, ns=(1,), checks=None,
                         n_paths=None, seed=None, normalization: str = "literal") -> list[VerificationReport]:
    """Build the requested reports (``lsi-damped``, ``lsi-l2``, ``lsi-windowed``,
    ``poincare``) from the per-path samples of one function."""
    M = get_manifold(M)
    checks = checks or ("lsi-damped", "lsi-l2", "lsi-windowed", "poincare")
    if normalization not in LSI_FACTORS:
        raise UsageError(f"normalization must be one of {sorted(LSI_FACTORS)}")
    factor = LSI_FACTORS[normalization]
    F = np.asarray(s["F"], dtype=float)
    n = F.shape[0]
    if n < 2:
        raise UsageError("need at least two paths")
    ent, ent_infl = entropy(F ** 2)
    out = []
    common = {"normalization": normalization}
    if "lsi-damped" in checks:
        out.append(_report("lsi-damped", name, M, ent, ent_infl, factor * 0.5 * s["Dt2"], n, seed,
                           details={**common, "energy": Estimate.from_samples(0.5 * s["Dt2"])}))
    if "lsi-l2" in checks:
        C = _const.c_of_k(K)
        out.append(_report("lsi-l2", name, M, ent, ent_infl, factor * C * 0.5 * s["D2"], n, seed,
                           details={**common, "K": K, "C": C,
                                    "energy": Estimate.from_samples(0.5 * s["D2"])}))
    for nn in ns:
        a, b = ek_weights(K, T, nn)
        ek = a * s[f"head{nn}"] + b * s[f"tail{nn}"]
        det = {"K": K, "T": T, "n": nn, "c1": _const.c1(K, T), "c2n": _const.c2n(K, T, nn),
               "energy": Estimate.from_samples(ek)}
        if "lsi-windowed" in checks:
            out.append(_report(f"lsi-windowed[n={nn}]", name, M, ent, ent_infl, factor * ek, n, seed,
                               details={**det, **common}))
        if "poincare" in checks:
            c = F - F.mean()
            var = float(np.mean(c ** 2))
            out.append(_report(f"poincare[n={nn}]", name, M, var, c ** 2, ek, n, seed,
                               details={**det, "centering_bias": var / n}))
    return out


def run_suite(M, expressions, K: float, paths, ns=(1, 2, 4), checks=None,
              normalization: str = "literal") -> list[VerificationReport]:
    """All inequality reports for a list of registry expressions (or functions)."""
    M = get_manifold(M)
    T = paths.T
    for nn in ns:
        _check_window(T, nn)
    Fs = []
    for e in expressions:
        F = _as_function(M, e, T)
        Fs.append(F if F.name else CylinderFunction(F.integrands, F.outer, F.outer_grad, str(e)))
    samples = suite_samples(M, Fs, paths, ns)
    reports = []
    for F in Fs:
        reports += reports_from_samples(M, F.name, samples[F.name], K, T, ns, checks,
                                        seed=_seed_of(paths), normalization=normalization)
    return reports


def _check_window(T, n):
    if n < 1 or T < 1.0 / n - 1e-12:
        raise UsageError(f"window needs T >= 1/n, got T={T}, n={n}")


def check_lsi_damped(M, F, paths, normalization: str = "literal") -> VerificationReport:
    """``Ent(F^2) <= 2 * damped energy`` (homogeneous entropy form)."""
    M = get_manifold(M)
    F = _as_function(M, F, paths.T)
    s = suite_samples(M, [F], paths)[F.name or "F0"]
    return reports_from_samples(M, F.name, s, 0.0, paths.T, (), ("lsi-damped",), seed=_seed_of(paths),
                                normalization=normalization)[0]


def check_lsi_l2(M, F, K: float, paths, normalization: str = "literal") -> VerificationReport:
    """``Ent(F^2) <= 2 C(K) E(F, F)``."""
    M = get_manifold(M)
    F = _as_function(M, F, paths.T)
    s = suite_samples(M, [F], paths)[F.name or "F0"]
    return reports_from_samples(M, F.name, s, K, paths.T, (), ("lsi-l2",), seed=_seed_of(paths),
                                normalization=normalization)[0]


def check_lsi_windowed(M, F, K: float, T: float, n: int, y, paths,
                       normalization: str = "literal") -> VerificationReport:
    """``Ent(F^2) <= 2 E^K_{T,n,y}(F, F)`` under the law of BM from ``y`` up to ``T``."""
    M = get_manifold(M)
    _check_window(T, n)
    _horizon(paths, T)
    _check_start(M, paths, y)
    F = _as_function(M, F, T)
    s = suite_samples(M, [F], paths, (n,))[F.name or "F0"]
    return reports_from_samples(M, F.name, s, K, T, (n,), ("lsi-windowed",), seed=_seed_of(paths),
                                normalization=normalization)[0]


def check_poincare(M, F, K: float, T: float, n: int, y, paths) -> VerificationReport:
    """``Var(F) <= E^K_{T,n,y}(F, F)``, centring ``F`` by its sample mean."""
    M = get_manifold(M)
    _check_window(T, n)
    _horizon(paths, T)
    _check_start(M, paths, y)
    F = _as_function(M, F, T)
    s = suite_samples(M, [F], paths, (n,))[F.name or "F0"]
    return reports_from_samples(M, F.name, s, K, T, (n,), ("poincare",), seed=_seed_of(paths))[0]


def tail_window_expression(site: str, T: float, k: int) -> str:
    """Registry expression for ``k int_{T-1/k}^T f(gamma_s) ds``."""
    if k < 1 or T < 1.0 / k - 1e-12:
        raise UsageError(f"tail window needs T >= 1/k, got T={T}, k={k}")
    return f"affine(0;{k};window({T - 1.0 / k:.17g};{T:.17g};{site}))"


def poincare_tail_search(M, site: str, K: float, T: float, n: int, paths, ks=(1, 2, 4, 8)) -> list:
    """Non-gating Poincare reports for ``F_k = k int_{T-1/k}^T f``, the functions whose
    ``k -> oo`` limit carries the curvature information.  At desk scale a violation
    for a false ``K`` may be unresolvable; such rows come out inconclusive."""
    M = get_manifold(M)
    _check_window(T, n)
    exprs = [tail_window_expression(site, T, k) for k in ks if T >= 1.0 / k - 1e-12]
    reps = run_suite(M, exprs, K, paths, (n,), ("poincare",))
    return [replace(r, gating=False, details={**r.details, "k": k}) for r, k in zip(reps, ks)]


def _horizon(paths, T):
    if abs(paths.T - T) > 1e-12:
        raise UsageError(f"paths have horizon {paths.T}, check requested for T={T}")


# ----------------------------------------------------------------------------------
# heat semigroup along shared paths
# ----------------------------------------------------------------------------------

def build_test_function(M, y: FramePoint | None = None) -> SiteFunction:
    """``f`` with ``|grad f|(y) = 1`` and ``Hess f(y) = 0`` (cut off far from ``y`` when unbounded)."""
    M = get_manifold(M)
    y = M.base() if y is None else y
    y.validate(M, 1e-8)
    return test_function(M, y)


def perturbed_starts(M: Manifold, y: FramePoint, delta: float = FD_STEP) -> list[FramePoint]:
    """``[y, y+e_1, y-e_1, .., y+e_d, y-e_d]``: geodesic moves by ``delta`` along the frame,
    frames parallel transported."""
    out = [y]
    for i in range(M.dim):
        v = np.zeros(M.dim)
        v[i] = delta
        out += [geodesic_step(M, y, v), geodesic_step(M, y, -v)]
    return out


def _sampler(paths) -> PathSampler:
    if not isinstance(paths, PathSampler):
        raise UsageError("semigroup estimators need a PathSampler (paths are re-run from perturbed starts)")
    return paths


def crn_map(sampler: PathSampler, starts, record, fn) -> dict:
    """Run every block from each start with the *same* increments and apply
    ``fn(points_list, frames_list, increments)``; per-path results are concatenated."""
    M = sampler.manifold
    record = np.asarray(record, dtype=np.int64)

    def block(lo_count):
        lo, count = lo_count
        inc = brownian_increments(sampler.seed, lo, count, sampler.n_steps, M.dim, sampler.T)
        pts, frs = [], []
        for s in starts:
            p, f, _ = integrate_frames(M, s, inc, record)
            pts.append(p)
            frs.append(f)
        return fn(pts, frs, inc)

    from .hbm import concat_results, default_workers
    from concurrent.futures import ThreadPoolExecutor

    jobs = list(sampler.blocks())
    workers = sampler.workers or default_workers()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(block, jobs))
    else:
        results = [block(j) for j in jobs]
    return concat_results(results)


@dataclass(frozen=True)
class SemigroupEstimate:
    """``p_s f(y)`` and ``grad p_s f(y)`` (frame coordinates at ``y``) on an ``s``-grid."""

    y: FramePoint
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    gradient: np.ndarray  # (S, d)
    gradient_stderr: np.ndarray
    n_paths: int
    inconclusive: bool = False

    def to_dict(self) -> dict:
        return _jsonable({"times": self.times, "values": self.values, "stderr": self.stderr,
                          "gradient": self.gradient, "gradient_stderr": self.gradient_stderr,
                          "n_paths": self.n_paths, "inconclusive": self.inconclusive})


def _grid_indices(sampler: PathSampler, s_grid) -> np.ndarray:
    t = np.linspace(0.0, sampler.T, sampler.n_steps + 1)
    s_grid = np.atleast_1d(np.asarray(s_grid, dtype=float))
    if np.any(s_grid < 0) or np.any(s_grid > sampler.T + 1e-12):
        raise UsageError("s_grid must lie in [0, T]")
    idx = np.rint(s_grid / sampler.T * sampler.n_steps).astype(np.int64)
    if np.max(np.abs(t[idx] - s_grid)) > 1e-9 * max(1.0, sampler.T):
        raise UsageError("s_grid points must be nodes of the path grid")
    if np.any(np.diff(idx) <= 0):
        raise UsageError("s_grid must be strictly increasing")
    return idx


def estimate_semigroup(M, f: SiteFunction, y: FramePoint | None, s_grid, paths,
                       delta: float = FD_STEP, stderr_cap: float = np.inf) -> SemigroupEstimate:
    """Monte Carlo ``p_s f(y)`` with CRN central-difference gradients on a shared path set."""
    M = get_manifold(M)
    sampler = _sampler(paths)
    _check_manifold(M, sampler)
    y = sampler.base if y is None else y
    y.validate(M, 1e-8)
    sampler = PathSampler(M, sampler.T, sampler.n_steps, sampler.n_paths, sampler.seed, y,
                          sampler.block_size, sampler.workers)
    idx = _grid_indices(sampler, s_grid)
    starts = perturbed_starts(M, y, delta)

    def fn(pts, frs, inc):
        vals = f.value(pts[0])
        g = np.stack([(f.value(pts[1 + 2 * i]) - f.value(pts[2 + 2 * i])) / (2 * delta)
                      for i in range(M.dim)], axis=-1)
        return {"v": vals, "g": g}

    r = crn_map(sampler, starts, idx, fn)
    n = r["v"].shape[0]
    v = r["v"].mean(axis=0)
    se = r["v"].std(axis=0, ddof=1) / np.sqrt(n)
    g = r["g"].mean(axis=0)
    gse = r["g"].std(axis=0, ddof=1) / np.sqrt(n)
    bad = bool(np.max(se, initial=0) > stderr_cap or np.max(gse, initial=0) > stderr_cap)
    return SemigroupEstimate(y, sampler.T * idx / sampler.n_steps, v, se, g, gse, n, bad)


def check_gradient_inequality(M, f: SiteFunction, y: FramePoint | None, T: float, K: float, paths,
                              delta: float = FD_STEP, gating: bool = True) -> VerificationReport:
    """``|int_0^T grad p_s f(y) ds| <= int_0^T e^{Ks/2} p_s|grad f|(y) ds``.

    Both sides use the trapezoid rule over all nodes of the path grid; the
    difference against the rule on every second node enters the error budget.
    ``K`` is required: the caller states which curvature bound is being tested.
    """
    M = get_manifold(M)
    sampler = _sampler(paths)
    _check_manifold(M, sampler)
    _horizon(sampler, T)
    y = sampler.base if y is None else y
    y.validate(M, 1e-8)
    sampler = PathSampler(M, sampler.T, sampler.n_steps, sampler.n_paths, sampler.seed, y,
                          sampler.block_size, sampler.workers)
    times = np.linspace(0.0, T, sampler.n_steps + 1)
    w = trapezoid_weights(times)
    wc = np.zeros_like(w)
    if sampler.n_steps % 2 == 0:
        wc[::2] = trapezoid_weights(times[::2])
    starts = perturbed_starts(M, y, delta)
    growth = np.exp(K * times / 2)

    def fn(pts, frs, inc):
        diffs = np.stack([(f.value(pts[1 + 2 * i]) - f.value(pts[2 + 2 * i])) / (2 * delta)
                          for i in range(M.dim)], axis=-1)  # (P, S, d)
        gn = f.grad_norm(M, pts[0], frs[0]) * growth
        return {"L": np.einsum("psd,s->pd", diffs, w), "R": gn @ w,
                "Lc": np.einsum("psd,s->pd", diffs, wc), "Rc": gn @ wc}

    r = crn_map(sampler, starts, np.arange(sampler.n_steps + 1), fn)
    n = r["R"].shape[0]
    Lbar = r["L"].mean(axis=0)
    lhs = float(np.linalg.norm(Lbar))
    u = Lbar / lhs if lhs > 0 else np.zeros_like(Lbar)
    lhs_infl = r["L"] @ u
    budget = 0.0
    if sampler.n_steps % 2 == 0:
        coarse = float(r["Rc"].mean()) - float(np.linalg.norm(r["Lc"].mean(axis=0)))
        fine = float(r["R"].mean()) - lhs
        budget = abs(fine - coarse) / 3.0
    admissible = K >= -M.ricci_constant
    return _report("gradient", f.name, M, lhs, lhs_infl, r["R"], n, sampler.seed, budget, gating,
                   details={"K": K, "T": T, "admissible": admissible, "quadrature_budget": budget,
                            "delta": delta, "n_steps": sampler.n_steps})


# ----------------------------------------------------------------------------------
# small-time curvature limits
# ----------------------------------------------------------------------------------

#: Richardson weights eliminating the O(T) and O(T^2) terms for T, T/2, T/4
RICHARDSON3 = np.array([1.0 / 3.0, -2.0, 8.0 / 3.0])


@dataclass(frozen=True)
class RicciLimit:
    method: str
    estimate: Estimate
    per_T: dict
    target: float | None = None
    inconclusive: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable({"method": self.method, "estimate": self.estimate, "per_T": self.per_T,
                          "target": self.target, "inconclusive": self.inconclusive,
                          "details": self.details})


def _richardson_weights(T_seq) -> np.ndarray:
    """Weights ``w`` with ``sum w_i = 1`` and ``sum w_i T_i^k = 0`` for ``k = 1..m-1``."""
    T_seq = np.asarray(T_seq, dtype=float)
    m = T_seq.size
    V = np.vander(T_seq, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[0] = 1.0
    return np.linalg.solve(V, rhs)


def ricci_limit_samples(M, f: SiteFunction, y: FramePoint, T_seq, n_steps: int, n_paths: int, seed: int,
                        delta: float = FD_STEP, workers=None, block_size=None) -> dict:
    """Per-path ingredients of both curvature limits at each ``T`` of ``T_seq``.

    One path set over ``[0, max T]`` is integrated from ``y`` and from the
    ``2d`` perturbed starts; values are read off at the grid nodes ``T``.
    """
    M = get_manifold(M)
    T_seq = np.asarray(T_seq, dtype=float)
    Tmax = float(T_seq.max())
    kw = {} if block_size is None else {"block_size": block_size}
    sampler = PathSampler(M, Tmax, n_steps, n_paths, seed, y, workers=workers, **kw)
    idx = _grid_indices(sampler, np.sort(T_seq))
    order = np.argsort(T_seq)
    starts = perturbed_starts(M, y, delta)
    g0 = M.covector_coords(y.U, f.covector(y.x))
    step_idx = idx

    def fn(pts, frs, inc):
        fy = float(f.value(y.x))
        W = np.cumsum(inc, axis=1)[:, step_idx - 1]  # W at each recorded T
        Z = W @ g0  # (P, S)
        ft = f.value(pts[0]) - fy
        diffs = np.stack([(f.value(pts[1 + 2 * i]) - f.value(pts[2 + 2 * i])) / (2 * delta)
                          for i in range(M.dim)], axis=-1)
        return {"gn": f.grad_norm(M, pts[0], frs[0]), "b": diffs, "ft": ft, "Z": Z}

    r = crn_map(sampler, starts, idx, fn)
    # back to the caller's T order
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return {"T": T_seq, "g0": g0, "gn": r["gn"][:, inv], "b": r["b"][:, inv], "ft": r["ft"][:, inv],
            "Z": r["Z"][:, inv], "n": r["gn"].shape[0]}


def _combine_limit(method, T_seq, vals, infl, target, details):
    w = _richardson_weights(T_seq)
    n = infl.shape[0]
    comb = infl @ w
    est = float(vals @ w)
    se = float(np.std(comb, ddof=1) / np.sqrt(n))
    se_T = np.std(infl, axis=0, ddof=1) / np.sqrt(n)
    per_T = {f"{T:g}": Estimate(float(v), float(s), n) for T, v, s in zip(T_seq, vals, se_T)}
    bad = not np.isfinite(se) or se > 0.25
    return RicciLimit(method, Estimate(est, se, n), per_T, target, bad,
                      {**details, "richardson_weights": w})


def ricci_limit_gradient(samples: dict, target=None) -> RicciLimit:
    """``(p_T|grad f|(y) - |grad p_T f|(y)) / T`` extrapolated to ``T = 0``."""
    T = samples["T"]
    a, b = samples["gn"], samples["b"]
    mb = b.mean(axis=0)  # (S, d)
    nb = np.linalg.norm(mb, axis=-1)
    u = mb / np.maximum(nb, 1e-300)[:, None]
    vals = (a.mean(axis=0) - nb) / T
    infl = (a - np.einsum("psd,sd->ps", b, u)) / T
    return _combine_limit("gradient", T, vals, infl, target, {})


def ricci_limit_variance(samples: dict, target=None) -> RicciLimit:
    """``(1/T) (Var_T f / T - |grad p_T f|^2)`` extrapolated to ``T = 0``.

    ``Var_T f`` uses the control variates ``<W_T, g>`` and ``<W_T, g>^2 - T|g|^2``
    (``g = grad f(y)`` in the starting frame), both of exact mean zero.  The
    value of the formula with ``Var_T f / (2T)`` is reported per ``T`` as a
    diagnostic in ``details["verbatim"]``.
    """
    T = samples["T"]
    ft, Z = samples["ft"], samples["Z"]
    g2 = float(samples["g0"] @ samples["g0"])
    c1 = ft - Z
    c2 = ft ** 2 - Z ** 2 + T * g2
    m1 = c1.mean(axis=0)
    var = c2.mean(axis=0) - m1 ** 2
    var_infl = c2 - 2 * m1 * c1
    b = samples["b"]
    mb = b.mean(axis=0)
    nb2 = np.sum(mb ** 2, axis=-1)
    grad_infl = 2 * np.einsum("psd,sd->ps", b, mb)
    vals = (var / T - nb2) / T
    infl = (var_infl / T - grad_infl) / T
    verbatim = (var / (2 * T) - nb2) / T
    n = ft.shape[0]
    return _combine_limit("variance", T, vals, infl, target,
                          {"verbatim": {f"{t:g}": float(v) for t, v in zip(T, verbatim)},
                           "variance": {f"{t:g}": Estimate(float(v), float(np.std(vi, ddof=1) / np.sqrt(n)), n)
                                        for t, v, vi in zip(T, var, var_infl.T)}})


def ricci_target(M, f: SiteFunction, y: FramePoint) -> float:
    """Closed form ``1/2 Ric(grad f, grad f)(y)`` on the built-ins."""
    M = get_manifold(M)
    g = M.covector_coords(y.U, f.covector(y.x))
    return 0.5 * M.ricci_constant * float(g @ g)


def _check_tseq(T_seq):
    T_seq = np.asarray(T_seq, dtype=float)
    if T_seq.size < 3:
        raise UsageError("T_seq needs at least three values")
    if np.any(np.diff(T_seq) >= 0):
        raise UsageError("T_seq must be strictly decreasing")
    if np.any(T_seq <= 0):
        raise UsageError("T_seq must be positive")
    return T_seq


def estimate_ricci_limits(M, f: SiteFunction | None, y: FramePoint | None, T_seq=(0.02, 0.01, 0.005),
                          n_paths: int = 10 ** 6, seed: int = 0, n_steps: int = 128,
                          delta: float = FD_STEP, workers=None) -> dict:
    """Both curvature-limit estimators from one shared simulation."""
    M = get_manifold(M)
    T_seq = _check_tseq(T_seq)
    y = M.base() if y is None else y
    f = build_test_function(M, y) if f is None else f
    s = ricci_limit_samples(M, f, y, T_seq, n_steps, n_paths, seed, delta, workers)
    target = ricci_target(M, f, y)
    return {"gradient": ricci_limit_gradient(s, target), "variance": ricci_limit_variance(s, target),
            "target": target}


def estimate_ricci_limit_gradient(M, f, y, T_seq, paths, delta: float = FD_STEP) -> RicciLimit:
    sampler = _sampler(paths)
    s = ricci_limit_samples(M, f, y or sampler.base, _check_tseq(T_seq), sampler.n_steps, sampler.n_paths,
                            sampler.seed, delta, sampler.workers)
    return ricci_limit_gradient(s, ricci_target(M, f, y or sampler.base))


def estimate_ricci_limit_variance(M, f, y, T_seq, paths, delta: float = FD_STEP) -> RicciLimit:
    sampler = _sampler(paths)
    s = ricci_limit_samples(M, f, y or sampler.base, _check_tseq(T_seq), sampler.n_steps, sampler.n_paths,
                            sampler.seed, delta, sampler.workers)
    return ricci_limit_variance(s, ricci_target(M, f, y or sampler.base))


def limits_agree(a: RicciLimit, b: RicciLimit, k: float = 3.0, atol: float = 1e-10) -> bool:
    """Agreement within ``k`` combined standard errors, with a round-off floor ``atol``
    for the zero-variance flat case."""
    tol = max(k * np.hypot(a.estimate.stderr, b.estimate.stderr), atol)
    return abs(a.estimate.value - b.estimate.value) <= tol
