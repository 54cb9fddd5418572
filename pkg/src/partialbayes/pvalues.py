"""Per-hypothesis p-values: conditional (partially Bayes), limma, and t-test.

The conditional p-value averages z-test p-values ``2(1 - Phi(|z| / sigma))``
over the posterior of ``sigma^2`` given ``S^2 = s2``. With a discrete prior
that posterior is a finite set of weights, computed in log space so that
sample variances far outside the prior's support stay well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

from .npmle import log_marginal_density
from .priors import DiscretePrior, LimmaPrior
from .special import (
    DomainError,
    digamma,
    scaled_chisq_logpdf,
    std_normal_sf,
    t_survival,
    trigamma,
    trigamma_inverse,
)

_CHUNK = 1 << 22  # elements of the n x K posterior matrix held at once


def _as_float_arrays(z, s2):
    z = np.asarray(z, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if np.any(~(s2 > 0)):
        raise DomainError("s2 must be positive")
    return np.broadcast_arrays(z, s2)


def _scalarize(out, *args):
    return float(out) if all(np.ndim(a) == 0 for a in args) else out


def posterior_weights(prior: DiscretePrior, s2, nu: float) -> np.ndarray:
    """Posterior probabilities of the prior atoms given ``S^2 = s2``.

    Returns an array of shape ``s2.shape + (len(prior),)``.
    """
    s2 = np.asarray(s2, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    lp = scaled_chisq_logpdf(s2[..., None], prior.support, nu) + logw
    lp -= lp.max(axis=-1, keepdims=True)
    np.exp(lp, out=lp)
    lp /= lp.sum(axis=-1, keepdims=True)
    return lp


def conditional_pvalue(prior: DiscretePrior, z, s2, nu: float):
    """Two-sided conditional p-value for ``mu = 0`` given ``S^2 = s2``."""
    z, s2 = _as_float_arrays(z, s2)
    shape = z.shape
    zf, sf = z.ravel(), s2.ravel()
    out = np.empty(zf.size)
    sd = np.sqrt(prior.support)
    step = max(_CHUNK // max(len(prior), 1), 1)
    for start in range(0, zf.size, step):
        sl = slice(start, start + step)
        post = posterior_weights(prior, sf[sl], nu)
        tail = 2.0 * std_normal_sf(np.abs(zf[sl])[:, None] / sd)
        out[sl] = np.einsum("ij,ij->i", post, tail)
    out = np.where(zf == 0, 1.0, np.minimum(out, 1.0))
    return _scalarize(out.reshape(shape), z, s2)


def _log_integral_constant(nu: float) -> float:
    # C(nu) with the Jacobian 2/(nu+1) of t^2 -> u = sqrt((nu+1)t^2 - nu s^2)
    log_c = (
        -0.5 * nu * math.log1p(1.0 / nu)
        + gammaln(0.5 * (nu + 1))
        - 0.5 * math.log(math.pi)
        + 0.5 * math.log(nu + 1)
        - gammaln(0.5 * nu)
    )
    return log_c + math.log(2.0 / (nu + 1))


def conditional_pvalue_integral(prior: DiscretePrior, z: float, s2: float, nu: float,
                                epsabs: float = 1e-10) -> float:
    """Conditional p-value from its integral representation.

    Uses only the marginal densities of the sample variance at ``nu`` and
    ``nu + 1`` degrees of freedom. Integrated in the variable
    ``u = sqrt((nu+1) t^2 - nu s2)``, which removes the inverse square-root
    singularity at the lower limit; ``u`` runs from ``|z|`` to infinity.
    """
    z, s2 = float(z), float(s2)
    if not s2 > 0:
        raise DomainError("s2 must be positive")
    if z == 0:
        return 1.0
    az = abs(z)
    log_front = (
        _log_integral_constant(nu)
        + (0.5 * nu - 1.0) * math.log(s2)
        - float(log_marginal_density(prior, s2, nu))
    )

    def integrand(u):
        tau = (nu * s2 + u * u) / (nu + 1)
        log_g = float(log_marginal_density(prior, tau, nu + 1))
        return math.exp(log_front - 0.5 * (nu - 1) * math.log(tau) + log_g)

    # integrand decays like a Gaussian in u with scale at most the largest sd
    scale = math.sqrt(prior.support[-1])
    upper = az + 40.0 * scale
    breaks = sorted({az + k * math.sqrt(v) for v in prior.support for k in (1.0, 4.0)})
    breaks = [b for b in breaks if az < b < upper][:50]
    val, err = integrate.quad(integrand, az, upper, points=breaks or None, limit=400,
                              epsabs=epsabs, epsrel=1e-12)
    if not math.isfinite(val) or err > 1e-8:
        raise RuntimeError(f"p-value quadrature failed (err={err:.2g})")
    return min(val, 1.0)


def fit_limma(s2_values, nu: float) -> LimmaPrior:
    """Moment fit of the scaled inverse chi-square prior on log sample variances."""
    s2 = np.asarray(s2_values, dtype=float)
    if s2.size < 2:
        raise ValueError("need at least two sample variances")
    if np.any(~(s2 > 0)):
        raise DomainError("sample variances must be positive")
    e = np.log(s2)
    mean_e = float(e.mean())
    var_e = float(e.var(ddof=1))
    excess = var_e - float(trigamma(0.5 * nu))
    shift = float(digamma(0.5 * nu)) - math.log(0.5 * nu)
    if excess <= 0:
        return LimmaPrior(math.inf, math.exp(mean_e - shift))
    nu0 = 2.0 * trigamma_inverse(excess)
    log_s0sq = mean_e + float(digamma(0.5 * nu0)) - math.log(0.5 * nu0) - shift
    return LimmaPrior(nu0, math.exp(log_s0sq))


def moderated_variance(prior: LimmaPrior, s2, nu: float):
    if prior.is_point_mass:
        return np.full(np.shape(s2), prior.s0sq) if np.ndim(s2) else prior.s0sq
    return (prior.nu0 * prior.s0sq + nu * np.asarray(s2, dtype=float)) / (prior.nu0 + nu)


def limma_pvalue(prior: LimmaPrior, z, s2, nu: float):
    """Moderated t p-value ``2 * P(T_{nu0+nu} > |z| / s_tilde)``."""
    z, s2 = _as_float_arrays(z, s2)
    if prior.is_point_mass:
        out = 2.0 * std_normal_sf(np.abs(z) / math.sqrt(prior.s0sq))
    else:
        st = np.sqrt(moderated_variance(prior, s2, nu))
        out = 2.0 * t_survival(np.abs(z) / st, prior.nu0 + nu)
    out = np.where(z == 0, 1.0, np.minimum(out, 1.0))
    return _scalarize(out, z, s2)


def ttest_pvalue(z, s2, nu: float):
    z, s2 = _as_float_arrays(z, s2)
    out = 2.0 * t_survival(np.abs(z) / np.sqrt(s2), nu)
    out = np.where(z == 0, 1.0, np.minimum(out, 1.0))
    return _scalarize(out, z, s2)


def tweedie_precision(prior: DiscretePrior, s2, nu: float, method: str = "direct",
                      rel_step: float = 1e-6):
    """Posterior mean of ``1 / sigma^2`` given ``S^2 = s2``.

    ``method="direct"`` averages ``1/sigma_j^2`` over the posterior weights.
    ``"formula"`` uses the marginal density and its analytic derivative,
    ``(nu-2)/(nu s2) - (2/nu) f'(s2)/f(s2)``; ``"finite-difference"`` uses the
    same expression with a central difference of ``log f``.
    """
    if nu < 2:
        raise DomainError("nu must be at least 2")
    s2 = np.asarray(s2, dtype=float)
    if np.any(~(s2 > 0)):
        raise DomainError("s2 must be positive")
    if method == "direct":
        out = posterior_weights(prior, s2, nu) @ (1.0 / prior.support)
    else:
        if method == "formula":
            post = posterior_weights(prior, s2, nu)
            dlog = (0.5 * nu - 1.0) / s2 - 0.5 * nu * (post @ (1.0 / prior.support))
        elif method == "finite-difference":
            h = rel_step * s2
            dlog = (log_marginal_density(prior, s2 + h, nu)
                    - log_marginal_density(prior, s2 - h, nu)) / (2 * h)
        else:
            raise ValueError(f"unknown method {method!r}")
        out = (nu - 2.0) / (nu * s2) - (2.0 / nu) * dlog
    return _scalarize(out, s2)


@dataclass(frozen=True)
class PvalueMethod:
    """A p-value recipe: ``npmle``, ``limma``, ``ttest`` or ``oracle``.

    ``npmle`` and ``oracle`` with a discrete prior use the conditional
    p-value; ``limma`` and ``oracle`` with a :class:`LimmaPrior` use the
    closed-form moderated t p-value.
    """

    tag: str
    prior: Optional[Union[DiscretePrior, LimmaPrior]] = None

    def __post_init__(self):
        if self.tag not in ("npmle", "limma", "ttest", "oracle"):
            raise ValueError(f"unknown method {self.tag!r}")
        if self.tag != "ttest" and self.prior is None:
            raise ValueError(f"method {self.tag!r} needs a prior")
        if self.tag == "npmle" and not isinstance(self.prior, DiscretePrior):
            raise ValueError("npmle needs a discrete prior")
        if self.tag == "limma" and not isinstance(self.prior, LimmaPrior):
            raise ValueError("limma needs a LimmaPrior")

    def __call__(self, z, s2, nu):
        if self.tag == "ttest":
            return ttest_pvalue(z, s2, nu)
        if isinstance(self.prior, LimmaPrior):
            return limma_pvalue(self.prior, z, s2, nu)
        return conditional_pvalue(self.prior, z, s2, nu)

    def variance_scale(self, s2, nu):
        """Largest variance the method may attribute to a unit at ``s2``."""
        if self.tag == "ttest":
            return s2
        if isinstance(self.prior, LimmaPrior):
            return np.broadcast_to(moderated_variance(self.prior, s2, nu), s2.shape)
        return np.full_like(s2, self.prior.support[-1])


def rejection_threshold_curve(method: PvalueMethod, p_threshold: float, s2_grid, nu: float,
                              tol: float = 1e-8) -> np.ndarray:
    """Smallest ``|z|`` whose p-value is at most ``p_threshold``, per ``s2``.

    Entries are ``inf`` where no ``|z|`` up to ``1e3`` standard deviations
    rejects.
    """
    if not 0 < p_threshold < 1:
        raise DomainError("p_threshold must lie in (0, 1)")
    s2 = np.atleast_1d(np.asarray(s2_grid, dtype=float))
    if np.any(~(s2 > 0)):
        raise DomainError("s2 must be positive")
    cap = 1e3 * np.sqrt(np.maximum(method.variance_scale(s2, nu), s2))
    lo = np.zeros_like(s2)
    hi = np.ones_like(s2)
    active = method(hi, s2, nu) > p_threshold
    while np.any(active):
        lo = np.where(active, hi, lo)
        hi = np.where(active, 2.0 * hi, hi)
        active &= hi <= cap
        active &= method(hi, s2, nu) > p_threshold
    unreachable = method(hi, s2, nu) > p_threshold
    while True:
        open_ = (hi - lo > tol) & ~unreachable
        if not np.any(open_):
            break
        mid = 0.5 * (lo + hi)
        rej = method(mid, s2, nu) <= p_threshold
        hi = np.where(open_ & rej, mid, hi)
        lo = np.where(open_ & ~rej, mid, lo)
    return np.where(unreachable, np.inf, hi)
