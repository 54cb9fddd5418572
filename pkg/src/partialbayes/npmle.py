"""Nonparametric maximum likelihood for the variance prior.

Given sample variances ``S_i^2 ~ (sigma_i^2 / nu) chi2_nu`` with
``sigma_i^2 ~ G``, estimate ``G`` by maximizing the marginal log-likelihood
over distributions supported on a fixed log-spaced grid. The problem is
convex in the grid weights; the default solver is a primal-dual interior
point Newton method, with an accelerated EM fixed point available as an
alternative. Every fit reports its KKT gap, the largest violation of the
first-order optimality condition over the grid, so the solver quality is
checkable independently of how the fit was produced.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from .priors import DiscretePrior
from .special import DomainError, scaled_chisq_logpdf
from .summarize import SummaryDataset

logger = logging.getLogger(__name__)

PRUNE_THRESHOLD = 1e-10
KKT_CERTIFICATE = 1e-6


@dataclass(frozen=True)
class GridConfig:
    grid_size: int = 300
    lower_quantile: float = 0.01
    explicit_bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if not 0 <= self.lower_quantile < 1:
            raise ValueError("lower_quantile must lie in [0, 1)")
        if self.explicit_bounds is not None:
            lo, hi = self.explicit_bounds
            if not 0 < lo <= hi:
                raise ValueError("explicit bounds must satisfy 0 < lower <= upper")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "interior-point"  # or "em"
    tol: float = 1e-9
    max_iter: Optional[int] = None
    acceleration: bool = True
    kkt_target: float = 1e-8
    memory_budget: int = 1 << 30

    def iterations(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return 50000 if self.method == "em" else 500


@dataclass
class NpmleFit:
    prior: DiscretePrior
    log_likelihood: float
    kkt_gap: float
    iterations: int
    converged: bool
    grid: np.ndarray
    nu: float
    solver: str = "interior-point"
    trace: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "grid_bounds": [float(self.grid[0]), float(self.grid[-1])],
            "grid_size": int(len(self.grid)),
            "nu": float(self.nu),
            "support": self.prior.support.tolist(),
            "weights": self.prior.weights.tolist(),
            "log_likelihood": float(self.log_likelihood),
            "kkt_gap": float(self.kkt_gap),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "solver": self.solver,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "NpmleFit":
        lo, hi = d["grid_bounds"]
        size = int(d.get("grid_size", 1))
        grid = np.array([lo]) if size == 1 else np.geomspace(lo, hi, size)
        return cls(
            prior=DiscretePrior(d["support"], d["weights"]),
            log_likelihood=float(d["log_likelihood"]),
            kkt_gap=float(d["kkt_gap"]),
            iterations=int(d["iterations"]),
            converged=bool(d.get("converged", True)),
            grid=grid,
            nu=float(d["nu"]),
            solver=d.get("solver", "interior-point"),
        )


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest value with at least ``q`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty input")
    k = max(int(math.ceil(q * v.size)), 1)
    return float(v[k - 1])


def build_grid(s2_values, config: GridConfig = GridConfig()) -> np.ndarray:
    """Log-equispaced grid from the lower quantile to the maximum of ``s2_values``."""
    s2 = np.asarray(s2_values, dtype=float)
    if s2.size == 0:
        raise ValueError("cannot build a grid from an empty sample")
    if np.any(~(s2 > 0)):
        raise DomainError("sample variances must be positive")
    if config.explicit_bounds is not None:
        a, b = map(float, config.explicit_bounds)
    else:
        a = nearest_rank_quantile(s2, config.lower_quantile)
        b = float(s2.max())
    if a == b or config.grid_size == 1:
        return np.array([a])
    grid = np.exp(np.linspace(math.log(a), math.log(b), config.grid_size))
    grid[0], grid[-1] = a, b  # endpoints exact, not round-tripped through log/exp
    return grid


def log_marginal_density(prior: DiscretePrior, s2, nu: float) -> np.ndarray:
    s2 = np.asarray(s2, dtype=float)
    if np.any(~(s2 > 0)):
        raise DomainError("s2 must be positive")
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    lp = scaled_chisq_logpdf(s2[..., None], prior.support, nu)
    return logsumexp(lp + logw, axis=-1)


def marginal_density(prior: DiscretePrior, s2, nu: float):
    """Mixture density ``sum_j w_j p(s2 | sigma_j^2, nu)``."""
    out = np.exp(log_marginal_density(prior, s2, nu))
    return float(out) if np.ndim(s2) == 0 else out


def log_marginal_likelihood(prior: DiscretePrior, dataset) -> float:
    s2, nu = _unpack(dataset)
    return float(np.sum(log_marginal_density(prior, s2, nu)))


def kkt_gap(prior: DiscretePrior, dataset, grid) -> float:
    """Largest excess of the first-order function over its bound on ``grid``.

    For each grid variance ``v`` this is
    ``mean_i p(S_i^2 | v) / f(S_i^2) - 1``, floored at zero. It vanishes at
    the grid-restricted maximizer.
    """
    s2, nu = _unpack(dataset)
    grid = np.asarray(grid, dtype=float)
    logf = log_marginal_density(prior, s2, nu)
    worst = -np.inf
    for rows in _row_blocks(len(s2), len(grid), 1 << 27):
        lp = scaled_chisq_logpdf(s2[rows, None], grid, nu) - logf[rows, None]
        part = logsumexp(lp, axis=0)
        worst = part if np.ndim(worst) == 0 else np.logaddexp(worst, part)
    xi = np.exp(worst - math.log(len(s2)))
    return float(max(np.max(xi) - 1.0, 0.0))


def _unpack(dataset):
    if isinstance(dataset, SummaryDataset):
        return dataset.s2, dataset.nu
    s2, nu = dataset
    return np.asarray(s2, dtype=float), float(nu)


def _row_blocks(n, m, budget):
    step = max(int(budget // (8 * max(m, 1))), 1)
    for start in range(0, n, step):
        yield slice(start, min(start + step, n))


class _Likelihood:
    """Row-scaled likelihood matrix ``L_ij = p(s_i | v_j) / max_j p(s_i | v_j)``.

    Held in memory when it fits the budget, otherwise recomputed block by
    block on every product.
    """

    def __init__(self, s2, grid, nu, budget):
        self.s2, self.grid, self.nu = s2, grid, nu
        self.n, self.m = len(s2), len(grid)
        self.in_memory = 8 * self.n * self.m <= budget
        self.block = budget // 4 if not self.in_memory else None
        self.rowmax = np.empty(self.n)
        if self.in_memory:
            lp = scaled_chisq_logpdf(s2[:, None], grid, nu)
            self.rowmax = lp.max(axis=1)
            lp -= self.rowmax[:, None]
            np.exp(lp, out=lp)
            self.mat = lp
        else:
            logger.info("likelihood matrix exceeds memory budget; streaming %d rows", self.n)
            for rows in self._blocks():
                lp = scaled_chisq_logpdf(s2[rows, None], grid, nu)
                self.rowmax[rows] = lp.max(axis=1)

    def _blocks(self):
        return _row_blocks(self.n, self.m, self.block)

    def _get(self, rows):
        if self.in_memory:
            return self.mat[rows]
        lp = scaled_chisq_logpdf(self.s2[rows, None], self.grid, self.nu)
        lp -= self.rowmax[rows, None]
        return np.exp(lp)

    def matvec(self, w):
        if self.in_memory:
            return self.mat @ w
        return np.concatenate([self._get(r) @ w for r in self._blocks()])

    def rmatvec(self, v):
        if self.in_memory:
            return self.mat.T @ v
        out = np.zeros(self.m)
        for r in self._blocks():
            out += self._get(r).T @ v[r]
        return out

    def weighted_gram(self, d):
        """``L' diag(d^2) L`` for the Newton system."""
        if self.in_memory:
            A = self.mat * d[:, None]
            return A.T @ A
        out = np.zeros((self.m, self.m))
        for r in self._blocks():
            A = self._get(r) * d[r, None]
            out += A.T @ A
        return out

    def loglik(self, w):
        f = self.matvec(w)
        return float(np.sum(np.log(f)) + self.rowmax.sum())


def _max_step(x, dx, frac=0.995):
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, frac * float(np.min(-x[neg] / dx[neg])))


def _interior_point(lik: _Likelihood, solver: SolverConfig):
    """Primal-dual path following for ``min -mean(log Lw) + sum(w), w >= 0``.

    At the optimum ``sum(w) = 1``. The dual slack ``z = 1 - L'(1/f)/n``
    is the KKT residual, so ``max(-z)`` over the grid is the KKT gap.
    """
    n, m = lik.n, lik.m
    w = np.full(m, 1.0 / m)
    z = np.ones(m)
    trace = []
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, solver.iterations() + 1):
        f = lik.matvec(w)
        xi = lik.rmatvec(1.0 / f) / n
        grad = 1.0 - xi
        mu = float(w @ z) / m
        wn = w / w.sum()
        ll = lik.loglik(wn)
        trace.append(ll)
        gap = max(float(np.max(xi)) * w.sum() - 1.0, 0.0)
        rel = abs(ll - prev) / max(abs(ll), 1.0)
        if mu < 1e-10 and gap <= solver.kkt_target and rel <= solver.tol:
            converged = True
            break
        prev = ll
        sigma = 0.1 if mu > 1e-8 else 0.01
        H = lik.weighted_gram(1.0 / f) / n
        H[np.diag_indices(m)] += z / w
        rhs = -grad + sigma * mu / w
        try:
            dw = cho_solve(cho_factor(H), rhs)
        except LinAlgError:
            H[np.diag_indices(m)] += 1e-12 * np.trace(H) / m
            dw = np.linalg.solve(H, rhs)
        dz = (sigma * mu - w * z - z * dw) / w
        w = w + _max_step(w, dw) * dw
        z = z + _max_step(z, dz) * dz
    return w / w.sum(), it, converged, trace


def _em(lik: _Likelihood, solver: SolverConfig):
    """Multiplicative EM with SQUAREM steps and a monotonicity fallback."""
    n, m = lik.n, lik.m
    w = np.full(m, 1.0 / m)

    def step(v):
        f = lik.matvec(v)
        u = v * lik.rmatvec(1.0 / f) / n
        return u / u.sum()

    ll = lik.loglik(w)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, solver.iterations() + 1):
        w1 = step(w)
        if solver.acceleration:
            w2 = step(w1)
            r = w1 - w
            v = w2 - w1 - r
            vv = float(v @ v)
            alpha = -math.sqrt(float(r @ r) / vv) if vv > 0 else -1.0
            alpha = min(alpha, -1.0)
            cand = np.maximum(w - 2 * alpha * r + alpha * alpha * v, 0.0)
            cand = step(cand / cand.sum()) if cand.sum() > 0 else w2
            new = lik.loglik(cand)
            if not new >= ll - 1e-12 * abs(ll):
                cand, new = w2, lik.loglik(w2)
            if new < ll:
                # stay monotone exactly: plain EM steps never decrease
                cand, new = w1, lik.loglik(w1)
        else:
            cand, new = w1, lik.loglik(w1)
        rel = (new - ll) / max(abs(new), 1.0)
        w, ll = cand, new
        trace.append(ll)
        if rel <= solver.tol:
            f = lik.matvec(w)
            gap = float(np.max(lik.rmatvec(1.0 / f) / n)) - 1.0
            if gap <= solver.kkt_target:
                converged = True
                break
    return w, it, converged, trace


def fit_npmle(
    dataset,
    config: GridConfig = GridConfig(),
    solver: SolverConfig = SolverConfig(),
    nu: Optional[float] = None,
) -> NpmleFit:
    """Fit the grid-restricted NPMLE of the variance prior.

    Parameters
    ----------
    dataset : SummaryDataset or array of sample variances
        Only the sample variances are used. If an array is passed, ``nu``
        must be given.
    config : GridConfig
    solver : SolverConfig

    Returns
    -------
    NpmleFit
        Weights below ``1e-10`` are pruned and the rest renormalized; the
        reported KKT gap and log-likelihood refer to the pruned prior.
    """
    if isinstance(dataset, SummaryDataset):
        s2, nu = dataset.s2, dataset.nu
    else:
        if nu is None:
            raise ValueError("nu is required when passing raw sample variances")
        s2 = np.asarray(dataset, dtype=float)
    if s2.size == 0:
        raise ValueError("cannot fit an empty dataset")
    if np.any(~(s2 > 0)):
        raise DomainError("sample variances must be positive")
    grid = build_grid(s2, config)

    if len(grid) == 1:
        prior = DiscretePrior(grid, [1.0])
        ll = log_marginal_likelihood(prior, (s2, nu))
        return NpmleFit(prior, ll, kkt_gap(prior, (s2, nu), grid), 0, True, grid, nu,
                        solver.method, [ll])

    lik = _Likelihood(s2, grid, nu, solver.memory_budget)
    if solver.method == "interior-point":
        w, iters, converged, trace = _interior_point(lik, solver)
    elif solver.method == "em":
        w, iters, converged, trace = _em(lik, solver)
    else:
        raise ValueError(f"unknown solver {solver.method!r}")

    keep = w >= PRUNE_THRESHOLD
    prior = DiscretePrior(grid[keep], w[keep])
    ll = log_marginal_likelihood(prior, (s2, nu))
    gap = kkt_gap(prior, (s2, nu), grid)
    if not converged:
        logger.warning("NPMLE solver stopped after %d iterations (KKT gap %.3g)", iters, gap)
    return NpmleFit(prior, ll, gap, iters, converged, grid, nu, solver.method, trace)


# --------------------------------------------------------------------------
# Hellinger distance


def marginal_evaluator(prior: DiscretePrior, nu: float) -> Callable:
    return lambda t: np.exp(log_marginal_density(prior, np.atleast_1d(t), nu))


def _tail_bounds(f, g, eps=1e-13):
    hi = 1.0
    while max(f(hi)[0], g(hi)[0]) * hi > eps:
        hi *= 2.0
        if hi > 1e300:
            raise RuntimeError("could not find an upper integration limit")
    lo = 1.0
    while max(f(lo)[0], g(lo)[0]) * lo > eps:
        lo *= 0.5
        if lo < 1e-300:
            break
    return lo, hi


def hellinger_distance(f: Callable, g: Callable, bounds=None) -> float:
    """Hellinger distance between two densities on ``(0, inf)``.

    ``f`` and ``g`` map an array of points to density values. The squared
    distance ``0.5 * int (sqrt f - sqrt g)^2`` is integrated on the log
    scale between limits beyond which both densities carry negligible mass.
    """
    lo, hi = bounds if bounds is not None else _tail_bounds(f, g)

    def integrand(u):
        t = math.exp(u)
        d = math.sqrt(f(t)[0]) - math.sqrt(g(t)[0])
        return d * d * t

    val, err = integrate.quad(integrand, math.log(lo), math.log(hi), limit=500,
                              epsabs=1e-14, epsrel=1e-10)
    if not np.isfinite(val) or err > 1e-10:
        raise RuntimeError(f"Hellinger quadrature did not converge (err={err:.2g})")
    return math.sqrt(max(0.5 * val, 0.0))
