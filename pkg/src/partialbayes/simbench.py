"""Monte-Carlo benchmark of the five testing pipelines on simulated data.

A setting fixes the variance prior, the degrees of freedom, the null
proportion, the law of the non-null means and whether nulls are placed at
random or on the largest variances. Each replicate draws a dataset from its
own RNG stream (split from one root seed), runs the t-test, limma, NPMLE and
oracle pipelines, and records FDP, power, FNDP, the MinSVarFP indicator and
the mean null p-value. The report averages these over replicates.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from .mtp import RejectionResult, bh_reject, storey_reject
from .npmle import GridConfig, SolverConfig, fit_npmle
from .priors import DiscretePrior, LimmaPrior
from .pvalues import conditional_pvalue, fit_limma, limma_pvalue, ttest_pvalue
from .special import sample, spawn_streams
from .summarize import SummaryDataset

logger = logging.getLogger(__name__)

METHODS = ("ttest", "limma", "npmle", "oracle", "oracle_storey")
METRICS = ("fdr", "power", "fndr", "min_svar_fp", "null_p_mean")
MIN_SVAR_CUTOFF = 0.2


@dataclass(frozen=True)
class VariancePrior:
    """``dirac(value)``, ``scaled_inv_chisq(nu0, s0sq)`` or ``two_point(v1, v2, w)``."""

    kind: str
    params: tuple

    def __post_init__(self):
        n_params = {"dirac": 1, "scaled_inv_chisq": 2, "two_point": 3}
        if self.kind not in n_params or len(self.params) != n_params[self.kind]:
            raise ValueError(f"bad variance prior {self.kind}{self.params}")
        self.as_prior()

    @classmethod
    def dirac(cls, value=1.0):
        return cls("dirac", (float(value),))

    @classmethod
    def scaled_inv_chisq(cls, nu0=6.0, s0sq=1.0):
        return cls("scaled_inv_chisq", (float(nu0), float(s0sq)))

    @classmethod
    def two_point(cls, v1=10.0, v2=1.0, w=0.5):
        return cls("two_point", (float(v1), float(v2), float(w)))

    def as_prior(self) -> Union[DiscretePrior, LimmaPrior]:
        if self.kind == "dirac":
            return DiscretePrior.point(self.params[0])
        if self.kind == "scaled_inv_chisq":
            return LimmaPrior(*self.params)
        v1, v2, w = self.params
        return DiscretePrior([v1, v2], [w, 1.0 - w])

    def label(self) -> str:
        return f"{self.kind}({','.join(f'{p:g}' for p in self.params)})"


@dataclass(frozen=True)
class SignalLaw:
    """Law of non-null means: ``normal_scaled(gamma)`` draws ``N(0, gamma sigma^2)``,
    ``normal_fixed(tau2)`` draws ``N(0, tau2)``, ``dirac(m)`` sets ``mu = m``."""

    kind: str = "normal_scaled"
    param: float = 16.0

    def __post_init__(self):
        if self.kind not in ("normal_scaled", "normal_fixed", "dirac"):
            raise ValueError(f"bad signal law {self.kind!r}")
        if self.kind != "dirac" and not self.param > 0:
            raise ValueError("signal variance must be positive")

    def label(self) -> str:
        return f"{self.kind}({self.param:g})"


@dataclass(frozen=True)
class SimSetting:
    nu: float
    variance_prior: VariancePrior = VariancePrior.scaled_inv_chisq()
    n: int = 10000
    null_prop: float = 0.9
    signal_law: SignalLaw = SignalLaw()
    ordering: str = "random"
    alpha: float = 0.1
    grid: GridConfig = GridConfig()
    storey_lambda: float = 0.5

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.null_prop <= 1:
            raise ValueError("need n >= 1 and null_prop in [0, 1]")
        if self.nu < 2:
            raise ValueError("nu must be at least 2")
        if self.ordering not in ("random", "adversarial"):
            raise ValueError(f"bad ordering {self.ordering!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def n_null(self) -> int:
        return int(math.floor(self.n * self.null_prop + 0.5))

    @property
    def name(self) -> str:
        return f"{self.variance_prior.label()}_nu{self.nu:g}_{self.ordering}_{self.signal_law.label()}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variance_prior"] = {"kind": self.variance_prior.kind,
                               "params": list(self.variance_prior.params)}
        d["grid"]["explicit_bounds"] = (list(self.grid.explicit_bounds)
                                        if self.grid.explicit_bounds else None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimSetting":
        d = dict(d)
        vp = d.pop("variance_prior", None)
        if vp is not None:
            d["variance_prior"] = VariancePrior(vp["kind"], tuple(float(x) for x in vp["params"]))
        sl = d.pop("signal_law", None)
        if sl is not None:
            d["signal_law"] = SignalLaw(sl["kind"], float(sl["param"]))
        g = d.pop("grid", None)
        if g is not None:
            bounds = g.get("explicit_bounds")
            d["grid"] = GridConfig(int(g.get("grid_size", 300)),
                                   float(g.get("lower_quantile", 0.01)),
                                   tuple(bounds) if bounds else None)
        return cls(**d)


@dataclass
class SimTruth:
    mu: np.ndarray
    sigma2: np.ndarray
    null_mask: np.ndarray

    def __post_init__(self):
        if not (len(self.mu) == len(self.sigma2) == len(self.null_mask)):
            raise ValueError("truth arrays must have equal length")
        if not np.array_equal(self.null_mask, self.mu == 0):
            raise ValueError("null_mask must mark exactly the zero means")


def sample_dataset(setting: SimSetting, rng: np.random.Generator):
    """Draw one replicate: variances, null placement, means, then ``(Z, S^2)``."""
    n, n0 = setting.n, setting.n_null
    sigma2 = np.asarray(sample(rng, setting.variance_prior.as_prior().law(), n), dtype=float)
    null = np.zeros(n, dtype=bool)
    if setting.ordering == "random":
        null[rng.permutation(n)[:n0]] = True
    else:
        order = np.argsort(-sigma2, kind="stable")
        null[order[:n0]] = True
    mu = np.zeros(n)
    alt = ~null
    law = setting.signal_law
    if law.kind == "normal_scaled":
        mu[alt] = rng.standard_normal(alt.sum()) * np.sqrt(law.param * sigma2[alt])
    elif law.kind == "normal_fixed":
        mu[alt] = rng.standard_normal(alt.sum()) * math.sqrt(law.param)
    else:
        mu[alt] = law.param
    # a drawn mean of exactly zero would silently become a null
    mu[alt & (mu == 0)] = np.finfo(float).tiny
    z = mu + np.sqrt(sigma2) * rng.standard_normal(n)
    s2 = sigma2 * rng.chisquare(setting.nu, n) / setting.nu
    truth = SimTruth(mu, sigma2, mu == 0)
    return SummaryDataset.from_arrays(z, s2, setting.nu), truth


def oracle_pvalues(prior, z, s2, nu):
    if isinstance(prior, LimmaPrior):
        return limma_pvalue(prior, z, s2, nu)
    return conditional_pvalue(prior, z, s2, nu)


def run_methods(dataset: SummaryDataset, setting: SimSetting,
                truth: Optional[SimTruth] = None,
                solver: SolverConfig = SolverConfig()) -> Dict[str, tuple]:
    """p-values and rejections for each pipeline.

    Returns ``{method: (pvalues, RejectionResult)}``. The oracle pipelines
    use the setting's true variance prior; ``truth`` is not consulted.
    """
    z, s2, nu, alpha = dataset.z, dataset.s2, dataset.nu, setting.alpha
    out = {}
    p = ttest_pvalue(z, s2, nu)
    out["ttest"] = (p, bh_reject(p, alpha))
    lp = fit_limma(s2, nu)
    p = limma_pvalue(lp, z, s2, nu)
    out["limma"] = (p, bh_reject(p, alpha))
    fit = fit_npmle(s2, setting.grid, solver, nu=nu)
    p = conditional_pvalue(fit.prior, z, s2, nu)
    out["npmle"] = (p, bh_reject(p, alpha))
    p = oracle_pvalues(setting.variance_prior.as_prior(), z, s2, nu)
    out["oracle"] = (p, bh_reject(p, alpha))
    out["oracle_storey"] = (p, storey_reject(p, alpha, setting.storey_lambda))
    return out


def compute_metrics(truth: SimTruth, pvalues, rejection: RejectionResult, s2) -> dict:
    """Per-replicate FDP, power, FNDP, MinSVarFP indicator and mean null p-value.

    ``min_svar_fp`` and ``null_p_mean`` are ``None`` when there are no nulls.
    """
    pvalues = np.asarray(pvalues, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    rej = np.asarray(rejection.rejected, dtype=bool)
    null = truth.null_mask
    if not (len(pvalues) == len(rej) == len(null) == len(s2)):
        raise ValueError("length mismatch between truth, p-values, rejections and s2")
    n = len(null)
    n0 = int(null.sum())
    R = int(rej.sum())
    V = int((rej & null).sum())
    alt_missed = int((~rej & ~null).sum())
    rec = {
        "fdr": V / max(R, 1),
        "power": (R - V) / (n - n0) if n > n0 else 0.0,
        "fndr": alt_missed / max(n - R, 1),
        "min_svar_fp": None,
        "null_p_mean": None,
    }
    if n0:
        idx = np.flatnonzero(null)
        i_min = idx[np.argmin(s2[idx])]
        rec["min_svar_fp"] = float(pvalues[i_min] <= MIN_SVAR_CUTOFF)
        rec["null_p_mean"] = float(pvalues[idx].mean())
    return rec


def run_replicate(setting: SimSetting, rng: np.random.Generator,
                  solver: SolverConfig = SolverConfig()) -> Dict[str, dict]:
    dataset, truth = sample_dataset(setting, rng)
    results = run_methods(dataset, setting, truth, solver)
    return {m: compute_metrics(truth, p, r, dataset.s2) for m, (p, r) in results.items()}


def _replicate_task(args):
    setting, seed_seq, index, solver = args
    from .special import make_rng

    try:
        return run_replicate(setting, make_rng(seed_seq), solver)
    except Exception as exc:  # noqa: BLE001 - re-raised with the replicate index
        raise RuntimeError(f"replicate {index} failed: {exc!r}") from exc


@dataclass
class MetricSummary:
    estimate: float
    stderr: float
    count: int


@dataclass
class SimReport:
    setting: SimSetting
    replicates: int
    seed: int
    metrics: Dict[str, Dict[str, MetricSummary]] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def get(self, method: str, metric: str) -> MetricSummary:
        return self.metrics[method][metric]

    def to_dict(self) -> dict:
        return {
            "setting": self.setting.to_dict(),
            "setting_name": self.setting.name,
            "replicates": self.replicates,
            "seed": self.seed,
            "metrics": {m: {k: asdict(v) for k, v in d.items()} for m, d in self.metrics.items()},
            "manifest": self.manifest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self) -> List[list]:
        rows = []
        for method, d in self.metrics.items():
            for metric, s in d.items():
                rows.append([self.setting.name, method, metric, repr(s.estimate),
                             repr(s.stderr), self.replicates, self.seed])
        return rows

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["setting", "method", "metric", "estimate", "stderr", "replicates", "seed"])
        w.writerows(self.csv_rows())
        return buf.getvalue()


def _summarize(values: List[Optional[float]]) -> MetricSummary:
    v = np.array([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return MetricSummary(float("nan"), float("nan"), 0)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return MetricSummary(float(v.mean()), se, int(v.size))


def monte_carlo(setting: SimSetting, replicates: int = 200, seed: int = 0, threads: int = 1,
                solver: SolverConfig = SolverConfig()) -> SimReport:
    """Run ``replicates`` independent replicates and aggregate the metrics.

    Replicate ``r`` always uses the ``r``-th child of ``SeedSequence(seed)``
    and records are aggregated in replicate order, so the report does not
    depend on ``threads``.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    children = np.random.SeedSequence(seed).spawn(replicates)
    tasks = [(setting, children[r], r, solver) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_replicate_task, tasks))
    else:
        records = [_replicate_task(t) for t in tasks]
    metrics = {
        m: {k: _summarize([rec[m][k] for rec in records]) for k in METRICS}
        for m in METHODS
    }
    return SimReport(setting, replicates, seed, metrics)


def preset(name: str, **overrides) -> SimSetting:
    """Named settings: ``dirac``, ``scaled_inv_chisq`` and ``two_point``,
    each with ``nu`` and the other fields overridable."""
    priors = {
        "dirac": VariancePrior.dirac(1.0),
        "scaled_inv_chisq": VariancePrior.scaled_inv_chisq(6.0, 1.0),
        "two_point": VariancePrior.two_point(10.0, 1.0, 0.5),
    }
    if name not in priors:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(priors)}")
    overrides.setdefault("nu", 4)
    return SimSetting(variance_prior=priors[name], **overrides)
