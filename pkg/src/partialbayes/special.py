"""Special functions, the scaled chi-square density, and random sampling.

Everything here is vectorized over numpy arrays. The normal and Student-t
functions are thin wrappers over ``scipy.special`` (erfc- and incomplete
beta based, so accurate far into the tails); trigamma inversion is done
locally by Newton iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special as sc

ArrayLike = Union[float, np.ndarray]


class DomainError(ValueError):
    """Raised when an argument lies outside a function's domain."""


def _check_positive(name, x, strict=True):
    arr = np.asarray(x, dtype=float)
    bad = ~(arr > 0) if strict else ~(arr >= 0)
    bad &= ~np.isnan(arr)
    if np.any(bad):
        raise DomainError(f"{name} must be {'positive' if strict else 'nonnegative'}")
    return arr


def std_normal_cdf(x: ArrayLike) -> ArrayLike:
    """Standard normal distribution function."""
    return sc.ndtr(x)


def std_normal_sf(x: ArrayLike) -> ArrayLike:
    """Upper tail ``1 - Phi(x)`` without cancellation for large ``x``."""
    return sc.ndtr(-np.asarray(x, dtype=float))


def std_normal_quantile(p: ArrayLike) -> ArrayLike:
    """Inverse of :func:`std_normal_cdf` on the open unit interval."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr <= 0) | (arr >= 1) | np.isnan(arr)):
        raise DomainError("p must lie in (0, 1)")
    x = sc.ndtri(arr)
    # one Newton polish step against ndtr
    x = x - (sc.ndtr(x) - arr) / np.exp(-0.5 * x * x - 0.5 * math.log(2 * math.pi))
    return x if np.ndim(p) else float(x)


def t_survival(t: ArrayLike, df: ArrayLike) -> ArrayLike:
    """Survival function ``P(T_df > t)`` of Student's t, for real ``df > 0``."""
    df = np.asarray(df, dtype=float)
    if np.any(~(df > 0)):
        raise DomainError("df must be positive")
    return sc.stdtr(df, -np.asarray(t, dtype=float))


def t_quantile(p: ArrayLike, df: ArrayLike) -> ArrayLike:
    return sc.stdtrit(df, p)


def scaled_chisq_logpdf(s2: ArrayLike, sigma2: ArrayLike, nu: float) -> ArrayLike:
    """Log density of ``S^2`` when ``S^2 ~ (sigma2 / nu) * chi2_nu``.

    Broadcasts over ``s2`` and ``sigma2``.
    """
    s2 = _check_positive("s2", s2)
    sigma2 = _check_positive("sigma2", sigma2)
    if not nu > 0:
        raise DomainError("nu must be positive")
    h = 0.5 * nu
    const = h * math.log(h) - sc.gammaln(h)
    return const - h * np.log(sigma2) + (h - 1.0) * np.log(s2) - h * s2 / sigma2


def digamma(x: ArrayLike) -> ArrayLike:
    _check_positive("x", x)
    return sc.digamma(x)


def trigamma(x: ArrayLike) -> ArrayLike:
    _check_positive("x", x)
    return sc.polygamma(1, x)


def trigamma_inverse(y: ArrayLike, tol: float = 1e-8, max_iter: int = 100) -> ArrayLike:
    """Solve ``trigamma(x) = y`` for ``x > 0``.

    Newton iteration on ``1 / trigamma``, which is convex and increasing,
    started at ``0.5 + 1/y``. The iterates approach the root monotonically.
    """
    y = _check_positive("y", y)
    scalar = y.ndim == 0
    y = np.atleast_1d(y).astype(float)
    x = np.empty_like(y)
    # asymptotes: trigamma(x) ~ 1/x^2 near 0 and ~ 1/x for large x
    big = y > 1e7
    small = y < 1e-6
    x[big] = 1.0 / np.sqrt(y[big])
    x[small] = 1.0 / y[small]
    mid = ~(big | small)
    xm = 0.5 + 1.0 / y[mid]
    ym = y[mid]
    for _ in range(max_iter):
        tri = sc.polygamma(1, xm)
        step = tri * (1.0 - tri / ym) / sc.polygamma(2, xm)
        xm = xm + step
        if np.all(np.abs(step) <= tol * xm):
            break
    x[mid] = xm
    return float(x[0]) if scalar else x


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class StandardNormal:
    pass


@dataclass(frozen=True)
class ChiSquare:
    df: float

    def __post_init__(self):
        if not self.df > 0:
            raise DomainError("chi-square df must be positive")


@dataclass(frozen=True)
class ScaledInvChiSquare:
    """Law of ``sigma2 = nu0 * s0sq / X`` with ``X ~ chi2_nu0``."""

    nu0: float
    s0sq: float

    def __post_init__(self):
        if not (self.nu0 > 0 and self.s0sq > 0):
            raise DomainError("nu0 and s0sq must be positive")


@dataclass(frozen=True)
class Discrete:
    """Draws from a finite set of atoms with given probabilities."""

    support: tuple
    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.support) != len(w) or len(w) == 0 or np.any(w < 0):
            raise DomainError("invalid discrete law")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DomainError("discrete weights must sum to 1")


def make_rng(seed) -> np.random.Generator:
    """Seedable PCG64 generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_streams(seed: int, count: int) -> list:
    """Independent child generators derived from one root seed."""
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def sample(rng: np.random.Generator, law, size=None):
    """Draw from one of the supported laws using the explicit stream ``rng``."""
    if isinstance(law, StandardNormal):
        return rng.standard_normal(size)
    if isinstance(law, ChiSquare):
        return rng.chisquare(law.df, size)
    if isinstance(law, ScaledInvChiSquare):
        return law.nu0 * law.s0sq / rng.chisquare(law.nu0, size)
    if isinstance(law, Discrete):
        support = np.asarray(law.support, dtype=float)
        if len(support) == 1:
            return np.full(size, support[0]) if size is not None else float(support[0])
        idx = rng.choice(len(support), size=size, p=np.asarray(law.weights, dtype=float))
        return support[idx]
    raise DomainError(f"unsupported law: {law!r}")
