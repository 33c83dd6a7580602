from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    stderr: float
    n: int = 0

    @classmethod
    def from_samples(cls, x) -> "Estimate":
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
        return cls(float(np.mean(x)), se, n)

    def __iter__(self):
        yield self.value
        yield self.stderr

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr, "n": self.n}


def stderr(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / np.sqrt(x.shape[0]))


def entropy(q) -> tuple[float, np.ndarray]:
    """Plug-in ``Ent(q) = mean(q log q) - m log m`` and its per-sample influence.

    ``q`` is nonnegative (here ``F^2``); ``q log q`` is taken as 0 below 1e-300.
    """
    q = np.asarray(q, dtype=float)
    qlq = np.where(q > 1e-300, q * np.log(np.where(q > 1e-300, q, 1.0)), 0.0)
    m = float(np.mean(q))
    if m <= 1e-300:
        return 0.0, np.zeros_like(q)
    ent = float(np.mean(qlq)) - m * np.log(m)
    return ent, qlq - (np.log(m) + 1.0) * q


def batch_means(x, n_batches: int = 20) -> Estimate:
    """Mean of a correlated series with a batch-means standard error."""
    x = np.asarray(x, dtype=float)
    b = x.shape[0] // n_batches
    means = x[: b * n_batches].reshape(n_batches, b, *x.shape[1:]).mean(axis=1)
    return Estimate(float(np.mean(x)), float(np.std(means, ddof=1) / np.sqrt(n_batches)), x.shape[0])
