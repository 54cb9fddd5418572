"""Benjamini-Hochberg step-up, adjusted p-values, and Storey's adaptive variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .special import DomainError


@dataclass(frozen=True)
class RejectionResult:
    rejected: np.ndarray
    threshold: float
    k_star: int

    @property
    def n_rejected(self) -> int:
        return int(self.rejected.sum())


def _check_pvalues(pvalues):
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1:
        raise DomainError("p-values must be a 1-d vector")
    if np.any(~((p >= 0) & (p <= 1))):
        raise DomainError("p-values must lie in [0, 1]")
    return p


def _check_level(alpha, name="alpha"):
    if not 0 < alpha < 1:
        raise DomainError(f"{name} must lie in (0, 1)")


def bh_reject(pvalues, alpha: float) -> RejectionResult:
    """Benjamini-Hochberg at level ``alpha``.

    Rejects every hypothesis whose p-value is at most ``P_(k*)``, where
    ``k* = max{l : P_(l) <= alpha * l / n}``.
    """
    p = _check_pvalues(pvalues)
    _check_level(alpha)
    n = p.size
    if n == 0:
        return RejectionResult(np.zeros(0, dtype=bool), 0.0, 0)
    ps = np.sort(p, kind="stable")
    ok = np.nonzero(ps <= alpha * np.arange(1, n + 1) / n)[0]
    if ok.size == 0:
        return RejectionResult(np.zeros(n, dtype=bool), 0.0, 0)
    k = int(ok[-1]) + 1
    thr = float(ps[k - 1])
    return RejectionResult(p <= thr, thr, k)


def bh_adjust(pvalues) -> np.ndarray:
    """Step-up adjusted p-values, ``min(1, min_{j >= i} n p_(j) / j)``, in input order."""
    p = _check_pvalues(pvalues)
    n = p.size
    if n == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * n / np.arange(1, n + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adj = np.empty(n)
    adj[order] = adj_sorted
    return adj


def storey_pi0(pvalues, lam: float = 0.5) -> float:
    """Null proportion estimate ``(1 + #{p > lam}) / (n (1 - lam))``, capped at 1."""
    p = _check_pvalues(pvalues)
    _check_level(lam, "lambda")
    if p.size == 0:
        return 1.0
    return float(min(1.0, (1 + np.count_nonzero(p > lam)) / (p.size * (1.0 - lam))))


def storey_reject(pvalues, alpha: float, lam: float = 0.5) -> RejectionResult:
    """BH at the adapted level ``alpha / pi0``, clamped just below 1."""
    _check_level(alpha)
    pi0 = storey_pi0(pvalues, lam)
    return bh_reject(pvalues, min(alpha / pi0, 1.0 - 1e-12))
