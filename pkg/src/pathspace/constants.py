"""Explicit constants of the path-space functional inequalities.

All four functions have removable singularities at ``K = 0``; below
``SERIES_THRESHOLD`` a three-term Taylor expansion is used instead of the
closed form, which would lose all digits to cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .exceptions import DomainError

SERIES_THRESHOLD = 1e-4


@dataclass(frozen=True)
class CurvatureBound:
    """Lower Ricci bound ``Ric >= -K`` plus horizon ``T`` and window parameter ``n``."""

    K: float
    T: float = 1.0
    n: int = 1

    def __post_init__(self):
        if not math.isfinite(self.K):
            raise DomainError("K must be finite")
        if not self.T > 0:
            raise DomainError("T must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError("n must be a positive integer")

    def admissible_for(self, ricci_constant: float) -> bool:
        """``Ric = c I`` satisfies ``Ric >= -K`` iff ``K >= -c``."""
        return self.K >= -ricci_constant

    def as_dict(self) -> dict:
        return {"K": self.K, "T": self.T, "n": self.n, "c0": c0(self.K), "C": c_of_k(self.K),
                "c1": c1(self.K, self.T), "c2n": c2n(self.K, self.T, self.n)}


def _real(K) -> float:
    K = float(K)
    if not math.isfinite(K):
        raise DomainError("K must be finite")
    return K


def _positive(T) -> float:
    T = float(T)
    if not (T > 0 and math.isfinite(T)):
        raise DomainError("T must be a positive real")
    return T


def phi(K: float) -> float:
    """``(e^K - 1 - K) / K^2``."""
    K = _real(K)
    if abs(K) < SERIES_THRESHOLD:
        return 0.5 + K / 6.0 + K * K / 24.0
    return (math.expm1(K) - K) / (K * K)


def c0(K: float) -> float:
    """``C_0(K)``; the two-sided limit ``1/2`` at ``K = 0``."""
    K = _real(K)
    if abs(K) < SERIES_THRESHOLD:
        return 0.5 + K / 4.0 + (7.0 / 96.0 if K > 0 else 5.0 / 48.0) * K * K
    if K > 0:
        return 2.0 * math.expm1(K / 2.0) ** 2 / (K * K)
    # 2e^{K/2} - e^K = 1 - u with u = (e^{K/2} - 1)^2, and 1 - sqrt(1-u) = u / (1 + sqrt(1-u))
    u = math.expm1(K / 2.0) ** 2
    return 4.0 * u / (1.0 + math.sqrt(1.0 - u)) / (K * K)


def c_of_k(K: float) -> float:
    """``C(K) = phi(K) ∧ C_0(K)``."""
    return min(phi(K), c0(K))


def c1(K: float, T: float) -> float:
    """``C_1(K) = [(TK e^{KT} - e^{KT} + 1) / K^2] ∨ T^2/2``."""
    K, T = _real(K), _positive(T)
    x = K * T
    if abs(x) < SERIES_THRESHOLD:
        bracket = T * T * (0.5 + x / 3.0 + x * x / 8.0)
    else:
        bracket = (x * math.exp(x) - math.expm1(x)) / (K * K)
    return max(bracket, 0.5 * T * T)


def c2n(K: float, T: float, n: int) -> float:
    """``C_{2,n}(K) = (e^{KT} - 1) / K * (1 ∨ e^{-K/n})``."""
    K, T = _real(K), _positive(T)
    if int(n) != n or n < 1:
        raise DomainError("n must be a positive integer")
    x = K * T
    if abs(x) < SERIES_THRESHOLD:
        lead = T * (1.0 + x / 2.0 + x * x / 6.0)
    else:
        lead = math.expm1(x) / K
    return lead * max(1.0, math.exp(-K / n))


def all_constants(K: float, T: float = 1.0, n: int = 1) -> dict:
    return CurvatureBound(_real(K), _positive(T), n).as_dict()
