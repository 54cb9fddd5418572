"""Variance priors: finite discrete mixtures and the scaled inverse chi-square."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize, stats
from scipy.special import expit

from .special import DomainError, Discrete, ScaledInvChiSquare


@dataclass(frozen=True)
class DiscretePrior:
    """A finitely supported distribution on the variance scale.

    Duplicate atoms are merged and the weights renormalized on construction,
    so ``DiscretePrior([1, 1], [0.5, 0.5])`` equals ``DiscretePrior.point(1)``.
    """

    support: np.ndarray
    weights: np.ndarray

    def __init__(self, support, weights=None):
        support = np.atleast_1d(np.asarray(support, dtype=float))
        if weights is None:
            weights = np.full(support.shape, 1.0 / max(len(support), 1))
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if support.ndim != 1 or support.shape != weights.shape or support.size == 0:
            raise DomainError("support and weights must be nonempty 1-d arrays of equal length")
        if np.any(~(support > 0)) or np.any(~np.isfinite(support)):
            raise DomainError("support points must be positive and finite")
        if np.any(~(weights >= 0)) or not weights.sum() > 0:
            raise DomainError("weights must be nonnegative with positive total")
        order = np.argsort(support, kind="stable")
        support, weights = support[order], weights[order]
        uniq, inverse = np.unique(support, return_inverse=True)
        merged = np.bincount(inverse, weights=weights)
        total = merged.sum()
        if abs(total - 1.0) > 8 * np.finfo(float).eps * merged.size:
            merged = merged / total  # leave normalized input bit-exact
        uniq.setflags(write=False)
        merged.setflags(write=False)
        object.__setattr__(self, "support", uniq)
        object.__setattr__(self, "weights", merged)

    @classmethod
    def point(cls, c: float) -> "DiscretePrior":
        return cls([c], [1.0])

    def __len__(self):
        return len(self.support)

    def __eq__(self, other):
        if not isinstance(other, DiscretePrior):
            return NotImplemented
        return np.array_equal(self.support, other.support) and np.array_equal(
            self.weights, other.weights
        )

    def __hash__(self):
        return hash((self.support.tobytes(), self.weights.tobytes()))

    def law(self) -> Discrete:
        return Discrete(tuple(self.support), tuple(self.weights))

    def mean(self) -> float:
        return float(self.support @ self.weights)

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "weights": self.weights.tolist()}


@dataclass(frozen=True)
class LimmaPrior:
    """Scaled inverse chi-square prior: ``1/sigma2 ~ chi2_nu0 / (nu0 * s0sq)``.

    ``nu0 = inf`` encodes the point mass at ``s0sq``.
    """

    nu0: float
    s0sq: float

    def __post_init__(self):
        if not (self.nu0 > 0 and self.s0sq > 0 and math.isfinite(self.s0sq)):
            raise DomainError("nu0 and s0sq must be positive")

    @property
    def is_point_mass(self) -> bool:
        return math.isinf(self.nu0)

    def law(self):
        if self.is_point_mass:
            return Discrete((self.s0sq,), (1.0,))
        return ScaledInvChiSquare(self.nu0, self.s0sq)

    def _inv_gamma(self):
        # sigma2 is inverse-gamma with shape nu0/2 and scale nu0*s0sq/2
        return stats.invgamma(0.5 * self.nu0, scale=0.5 * self.nu0 * self.s0sq)

    def pdf(self, sigma2):
        """Density of ``sigma2``; undefined for the point-mass limit."""
        if self.is_point_mass:
            raise DomainError("point-mass prior has no density")
        return self._inv_gamma().pdf(sigma2)

    def marginal_pdf(self, s2, nu: float):
        """Density of ``S^2`` after integrating out ``sigma2``: ``s0sq * F(nu, nu0)``."""
        if self.is_point_mass:
            return stats.chi2(nu, scale=self.s0sq / nu).pdf(s2)
        return stats.f(nu, self.nu0, scale=self.s0sq).pdf(s2)

    def quantile(self, q):
        if self.is_point_mass:
            return np.full(np.shape(q), self.s0sq)
        return self._inv_gamma().ppf(q)

    def discretize(self, atoms: int = 2000, center_step: float = 0.1) -> DiscretePrior:
        """Quantile-spaced discretization with atoms dense in both tails.

        Cell edges live on the logit scale of the quantile level; each atom
        sits at the quantile of its cell's logit midpoint and carries the
        cell's prior mass. Equal mass cells would leave the tails, where
        extreme sample variances put their posterior, too coarse. The upper
        tail decays like ``sigma2^(-nu0/2)``, so the logit reach grows with
        ``nu0`` (up to 700); beyond what ``center_step`` spacing can cover,
        edges are stretched by a sinh map that keeps the center at
        ``center_step`` and widens the steps toward the tails.
        """
        if self.is_point_mass:
            return DiscretePrior.point(self.s0sq)
        reach = min(25.0 + 2.0 * self.nu0, 700.0)
        x = np.linspace(-1.0, 1.0, atoms + 1)
        ck = center_step * atoms / 2.0  # c * k, the slope at the center
        if reach <= ck:
            edges = reach * x
        else:
            k = optimize.brentq(lambda k: ck * math.sinh(k) / k - reach, 1e-9, 50.0)
            edges = (ck / k) * np.sinh(k * x)
        mid = 0.5 * (edges[1:] + edges[:-1])
        law = self._inv_gamma()
        # upper half through the survival function to keep tail precision
        support = np.where(mid <= 0, law.ppf(expit(np.minimum(mid, 0))),
                           law.isf(expit(-np.maximum(mid, 0))))
        lower_cdf = expit(edges)
        lower_cdf[0] = 0.0
        upper_sf = expit(-edges)
        upper_sf[-1] = 0.0
        weights = np.where(edges[1:] <= 0, np.diff(lower_cdf), -np.diff(upper_sf))
        return DiscretePrior(support, weights)

    def project_to_grid(self, grid) -> DiscretePrior:
        """Evaluate the density on ``grid`` and renormalize into a grid prior."""
        grid = np.asarray(grid, dtype=float)
        if self.is_point_mass:
            j = int(np.argmin(np.abs(np.log(grid) - math.log(self.s0sq))))
            w = np.zeros_like(grid)
            w[j] = 1.0
            return DiscretePrior(grid, w)
        w = self.pdf(grid)
        if not w.sum() > 0:
            w = np.ones_like(grid)
        return DiscretePrior(grid, w)

    def to_dict(self, cap: float = 1e8) -> dict:
        return {
            "nu0": cap if self.is_point_mass else float(self.nu0),
            "nu0_infinite": self.is_point_mass,
            "s0sq": float(self.s0sq),
        }
