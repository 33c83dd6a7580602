"""Horizontal Brownian motion on the frame bundle.

Paths are produced with the geodesic (Eells-Elworthy) scheme: move along
the geodesic with initial velocity ``U_k dW_k`` and parallel transport the
frame along it.  The anti-development increments ``dW_k`` are stored with
the path, so the flat model reproduces their partial sums exactly.

A :class:`DiscretePath` holds a *batch* of paths on a common grid (leading
axis = path index).  :class:`PathSampler` describes a path ensemble lazily
and evaluates per-path statistics block by block, which keeps memory flat
for 10^5-10^6 paths.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .exceptions import UsageError
from .geometry import FramePoint, Manifold, get_manifold
from .quadrature import trapezoid_weights

#: residual of the manifold constraint above which a path is flagged for resampling
RESAMPLE_TOL = 1e-6


@dataclass
class DiscretePath:
    manifold: Manifold
    times: np.ndarray  # (n+1,)
    points: np.ndarray  # (P, n+1, A)
    frames: np.ndarray  # (P, n+1, A, d)
    increments: np.ndarray  # (P, n, d)
    resample: np.ndarray = field(default=None)  # (P,) bool

    def __post_init__(self):
        if self.resample is None:
            self.resample = np.zeros(self.points.shape[0], dtype=bool)

    @property
    def n_paths(self) -> int:
        return self.points.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def __len__(self):
        return self.n_paths

    def __getitem__(self, idx) -> "DiscretePath":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return DiscretePath(self.manifold, self.times, self.points[idx], self.frames[idx],
                            self.increments[idx], self.resample[idx])


def brownian_increments(seed: int, start: int, count: int, n_steps: int, d: int, T: float,
                        stream: str = "hbm") -> np.ndarray:
    """Anti-development increments, shape ``(count, n_steps, d)``, variance ``T/n`` each."""
    z = _rng.block_normals(seed, f"{stream}:{n_steps}:{d}", start, count, (n_steps, d))
    return z * np.sqrt(T / n_steps)


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` increments (same Brownian path, coarser grid)."""
    P, n, d = increments.shape
    if n % factor:
        raise UsageError(f"{n} steps not divisible by {factor}")
    return increments.reshape(P, n // factor, factor, d).sum(axis=2)


def integrate_frames(M: Manifold, base: FramePoint, increments: np.ndarray, record=None,
                     backend: str = "compiled"):
    """Run the geodesic scheme on a block of increments ``(P, n, d)``.

    Returns ``(points, frames, resample)`` with points ``(P, R, A)`` and frames
    ``(P, R, A, d)`` at the step indices ``record`` (default: every node).
    ``backend="numpy"`` selects the reference implementation.
    """
    increments = np.ascontiguousarray(increments, dtype=float)
    P, n, d = increments.shape
    record = np.arange(n + 1) if record is None else np.asarray(record, dtype=np.int64)
    if np.any(np.diff(record) <= 0) or record[0] < 0 or record[-1] > n:
        raise UsageError("record indices must be increasing within 0..n")
    if M.ambient_dim > M.dim and backend == "compiled":
        from ._kernels import integrate_embedded

        return integrate_embedded(np.ascontiguousarray(base.x, dtype=float),
                                  np.ascontiguousarray(base.U, dtype=float), increments,
                                  M.signature, float(M.sectional), record, RESAMPLE_TOL)
    x = np.broadcast_to(base.x, (P, M.ambient_dim)).copy()
    U = np.broadcast_to(base.U, (P, M.ambient_dim, d)).copy()
    bad = np.zeros(P, dtype=bool)
    if M.ambient_dim == M.dim:
        # flat: exact partial sums of U0 dW
        w = np.einsum("ai,pki->pka", base.U, increments)
        pts = np.concatenate([x[:, None], x[:, None] + np.cumsum(w, axis=1)], axis=1)
        frames = np.broadcast_to(base.U, (P, record.size, M.ambient_dim, d)).copy()
        return pts[:, record], frames, bad
    points = np.empty((P, record.size, M.ambient_dim))
    frames = np.empty((P, record.size, M.ambient_dim, d))
    ri = 0
    if record[0] == 0:
        points[:, 0], frames[:, 0] = x, U
        ri = 1
    for k in range(n):
        x, U = step_frames(M, x, U, increments[:, k], bad)
        if ri < record.size and record[ri] == k + 1:
            points[:, ri], frames[:, ri] = x, U
            ri += 1
    return points, frames, bad


def step_frames(M: Manifold, x, U, dw, bad=None):
    """One geodesic step followed by renormalisation of point and frame."""
    x, U = M.exp_transport(x, U, dw)
    if M.ambient_dim > M.dim:
        res = np.abs(M.residual(x))
        if bad is not None:
            bad |= ~(res < RESAMPLE_TOL)
        x = x / np.sqrt(np.abs(M.inner(x, x)))[..., None]
        # strip the normal component picked up by rounding
        U = M.tangent_project(x[..., None, :], np.swapaxes(U, -1, -2))
        U = np.swapaxes(U, -1, -2)
    return x, U


def sample_path(M: Manifold | str, base: FramePoint | None = None, T: float = 1.0, n_steps: int = 128,
                seed: int = 0, n_paths: int = 1, start: int = 0,
                increments: np.ndarray | None = None) -> DiscretePath:
    """Sample paths ``start .. start+n_paths-1`` of horizontal Brownian motion.

    Parameters
    ----------
    M : manifold or id string
    base : starting frame point (defaults to the manifold's base frame)
    T, n_steps : horizon and number of uniform steps
    seed : global seed; path ``i`` is a pure function of ``(seed, i, n_steps)``
    increments : optional explicit anti-development increments ``(P, n, d)``
    """
    M = get_manifold(M)
    if n_steps < 1:
        raise UsageError("n_steps must be >= 1")
    if T <= 0:
        raise UsageError("T must be positive")
    base = M.base() if base is None else base
    base.validate(M)
    if increments is None:
        increments = brownian_increments(seed, start, n_paths, n_steps, M.dim, T)
    else:
        increments = np.asarray(increments, dtype=float)
        n_steps = increments.shape[1]
    times = np.linspace(0.0, T, n_steps + 1)
    points, frames, bad = integrate_frames(M, base, increments)
    return DiscretePath(M, times, points, frames, increments, bad)


def default_workers() -> int:
    return max(1, int(os.environ.get("PATHSPACE_WORKERS", "1")))


@dataclass(frozen=True)
class PathSampler:
    """A lazily evaluated ensemble of ``n_paths`` horizontal BM paths."""

    manifold: Manifold
    T: float = 1.0
    n_steps: int = 128
    n_paths: int = 10_000
    seed: int = 0
    base: FramePoint | None = None
    block_size: int = _rng.BLOCK
    workers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "manifold", get_manifold(self.manifold))
        if self.base is None:
            object.__setattr__(self, "base", self.manifold.base())

    def blocks(self):
        for lo in range(0, self.n_paths, self.block_size):
            yield lo, min(self.block_size, self.n_paths - lo)

    def block(self, lo: int, count: int) -> DiscretePath:
        return sample_path(self.manifold, self.base, self.T, self.n_steps, self.seed, count, lo)

    def map(self, fn) -> dict:
        """Apply ``fn(path_block) -> dict of per-path arrays`` and concatenate in path order."""
        jobs = list(self.blocks())
        run = lambda job: fn(self.block(*job))  # noqa: E731
        workers = self.workers or default_workers()
        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(run, jobs))
        else:
            results = [run(j) for j in jobs]
        return concat_results(results)

    def materialize(self) -> DiscretePath:
        return self.block(0, self.n_paths)


def concat_results(results: list) -> dict:
    out = {}
    for key in results[0]:
        vals = [r[key] for r in results]
        if isinstance(vals[0], dict):
            out[key] = concat_results(vals)
        else:
            out[key] = np.concatenate(vals, axis=0)
    return out


def as_sampler_or_path(paths):
    if isinstance(paths, (PathSampler, DiscretePath)):
        return paths
    raise UsageError(f"expected PathSampler or DiscretePath, got {type(paths).__name__}")


def map_paths(paths, fn) -> dict:
    """Evaluate ``fn`` on a path batch or on every block of a sampler."""
    paths = as_sampler_or_path(paths)
    if isinstance(paths, DiscretePath):
        return concat_results([fn(paths)])
    return paths.map(fn)


def manifold_of(paths) -> Manifold:
    return paths.manifold


def horizon_of(paths) -> float:
    return paths.T


# path-space distances ------------------------------------------------------------

def _check_grids(a: DiscretePath, b: DiscretePath):
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-14):
        raise UsageError("paths live on different time grids")
    if a.manifold != b.manifold:
        raise UsageError("paths live on different manifolds")


def sup_distance(a: DiscretePath, b: DiscretePath) -> np.ndarray:
    """Uniform distance ``max_k rho(a_k, b_k)`` per path pair."""
    _check_grids(a, b)
    return a.manifold.distance(a.points, b.points).max(axis=-1)


def l1_distance(a: DiscretePath, b: DiscretePath) -> np.ndarray:
    """``int_0^T rho(a_s, b_s) ds`` by the trapezoid rule, per path pair."""
    _check_grids(a, b)
    return a.manifold.distance(a.points, b.points) @ trapezoid_weights(a.times)


# binary dump ---------------------------------------------------------------------

PATH_MAGIC = b"HBMP"
FORMAT_VERSION = 1


def write_paths(fh, paths: DiscretePath, meta: dict | None = None):
    """Write a path batch: ``magic | u32 version | u32 header_len | JSON header | arrays``.

    Arrays follow as little-endian float64, row-major, in the order
    ``times (n+1)``, ``points (P, n+1, A)``, ``frames (P, n+1, A, d)``,
    ``increments (P, n, d)``.
    """
    M = paths.manifold
    header = {"manifold": M.id, "n_paths": paths.n_paths, "n_steps": paths.n_steps, "T": paths.T,
              "ambient_dim": M.ambient_dim, "dim": M.dim, **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(PATH_MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
    for arr in (paths.times, paths.points, paths.frames, paths.increments):
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_paths(fh) -> tuple[DiscretePath, dict]:
    magic = fh.read(4)
    if magic != PATH_MAGIC:
        raise UsageError("not a path dump (bad magic)")
    version, n = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise UsageError(f"unsupported path dump version {version}")
    header = json.loads(fh.read(n))
    M = get_manifold(header["manifold"])
    P, s, A, d = header["n_paths"], header["n_steps"], header["ambient_dim"], header["dim"]

    def take(*shape):
        count = int(np.prod(shape))
        return np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()

    times = take(s + 1)
    points = take(P, s + 1, A)
    frames = take(P, s + 1, A, d)
    incs = take(P, s, d)
    return DiscretePath(M, times, points, frames, incs), header
