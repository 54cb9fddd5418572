"""Command-line interface: ``partialbayes {test,diagnose,simulate,summarize}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .mtp import bh_adjust, bh_reject
from .npmle import GridConfig, NpmleFit, SolverConfig, fit_npmle, marginal_density
from .priors import LimmaPrior
from .pvalues import (
    PvalueMethod,
    conditional_pvalue,
    fit_limma,
    limma_pvalue,
    rejection_threshold_curve,
    ttest_pvalue,
)
from .simbench import SignalLaw, SimReport, SimSetting, VariancePrior, monte_carlo, preset
from .special import DomainError
from .summarize import SummaryDataset, SummaryError, atomic_open, read_matrix, read_pairs, write_pairs

logger = logging.getLogger("partialbayes")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PVALUE_METHODS = ("npmle", "limma", "ttest")


class NumericalFailure(RuntimeError):
    pass


@dataclass
class TestResult:
    """Per-hypothesis p-values for all three methods plus BH output per selected method."""

    ids: List[str]
    z: np.ndarray
    s2: np.ndarray
    pvalues: Dict[str, np.ndarray]
    adjusted: Dict[str, np.ndarray]
    rejected: Dict[str, np.ndarray]
    bh_threshold: Dict[str, float]
    alpha: float
    fit: NpmleFit
    limma: LimmaPrior
    methods: Sequence[str] = field(default_factory=tuple)

    def discoveries(self) -> Dict[str, int]:
        return {m: int(self.rejected[m].sum()) for m in self.methods}

    def header(self) -> List[str]:
        cols = ["id", "z", "s2"] + [f"p_{m}" for m in PVALUE_METHODS]
        cols += [f"adj_p_{m}" for m in self.methods]
        cols += [f"rejected_{m}" for m in self.methods]
        return cols

    def rows(self):
        for i, ident in enumerate(self.ids):
            row = [ident, repr(float(self.z[i])), repr(float(self.s2[i]))]
            row += [repr(float(self.pvalues[m][i])) for m in PVALUE_METHODS]
            row += [repr(float(self.adjusted[m][i])) for m in self.methods]
            row += ["1" if self.rejected[m][i] else "0" for m in self.methods]
            yield row


def analyze(dataset: SummaryDataset, alpha: float = 0.05, methods: Sequence[str] = PVALUE_METHODS,
            grid: GridConfig = GridConfig(), solver: SolverConfig = SolverConfig()) -> TestResult:
    """Fit the variance priors from ``S^2`` alone, then p-values and BH for each method."""
    if len(dataset) == 0:
        raise SummaryError("no hypotheses to test")
    z, s2, nu = dataset.z, dataset.s2, dataset.nu
    fit = fit_npmle(s2, grid, solver, nu=nu)
    lp = fit_limma(s2, nu) if len(s2) >= 2 else LimmaPrior(math.inf, float(s2[0]))
    pv = {
        "npmle": np.asarray(conditional_pvalue(fit.prior, z, s2, nu)),
        "limma": np.asarray(limma_pvalue(lp, z, s2, nu)),
        "ttest": np.asarray(ttest_pvalue(z, s2, nu)),
    }
    adjusted, rejected, thresholds = {}, {}, {}
    for m in methods:
        res = bh_reject(pv[m], alpha)
        adjusted[m] = bh_adjust(pv[m])
        rejected[m] = res.rejected
        thresholds[m] = res.threshold
    return TestResult(dataset.ids, z, s2, pv, adjusted, rejected, thresholds, alpha, fit, lp,
                      tuple(methods))


def _file_sha256(path) -> Optional[str]:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_manifest(args: argparse.Namespace, inputs: Sequence[str]) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {
        "command": args.command,
        "flags": flags,
        "inputs": {os.path.basename(p): _file_sha256(p) for p in inputs if p},
        "versions": {
            "partialbayes": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "seed": flags.get("seed"),
    }


def _write_json(path, obj):
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path, header, rows):
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _grid_config(args) -> GridConfig:
    return GridConfig(grid_size=args.grid_size, lower_quantile=args.lower_quantile)


def _check_fit(fit: NpmleFit, strict: bool):
    if strict and not fit.converged:
        raise NumericalFailure(f"NPMLE did not converge (KKT gap {fit.kkt_gap:.3g})")


def _sidecar_path(out: str) -> str:
    root, _ = os.path.splitext(out)
    return root + ".fit.json"


def cmd_test(args) -> int:
    dataset = read_pairs(args.input, args.df)
    methods = PVALUE_METHODS if args.method == "all" else (args.method,)
    result = analyze(dataset, args.alpha, methods, _grid_config(args), SolverConfig())
    _check_fit(result.fit, args.strict)
    sidecar = {
        "npmle": result.fit.to_dict(),
        "limma": result.limma.to_dict(),
        "alpha": args.alpha,
        "nu": dataset.nu,
        "n": len(dataset),
        "discoveries": result.discoveries(),
        "bh_threshold": {m: result.bh_threshold[m] for m in methods},
        "manifest": run_manifest(args, [args.input]),
    }
    # build both outputs before touching the filesystem
    rows = list(result.rows())
    sidecar_text = json.dumps(sidecar, indent=2, sort_keys=True, allow_nan=False) + "\n"
    _write_csv(args.out, result.header(), rows)
    with atomic_open(_sidecar_path(args.out)) as fh:
        fh.write(sidecar_text)
    for m in methods:
        print(f"{m}: discoveries={int(result.rejected[m].sum())} "
              f"bh_threshold={result.bh_threshold[m]!r}")
    return EXIT_OK


def _log_bins(s2, bins):
    lo, hi = float(s2.min()), float(s2.max())
    if lo == hi:
        lo, hi = lo / 1.01, hi * 1.01
    return np.geomspace(lo, hi, bins + 1)


def cmd_diagnose(args) -> int:
    dataset = read_pairs(args.input, args.df)
    result = analyze(dataset, args.alpha, PVALUE_METHODS, _grid_config(args), SolverConfig())
    _check_fit(result.fit, args.strict)
    s2, nu = dataset.s2, dataset.nu
    fit, lp = result.fit, result.limma
    out = args.out_dir

    edges = _log_bins(s2, args.bins)
    counts, _ = np.histogram(s2, edges)
    mids = np.sqrt(edges[1:] * edges[:-1])
    widths = np.diff(edges)
    f_np = marginal_density(fit.prior, mids, nu)
    f_lm = lp.marginal_pdf(mids, nu)
    hist_rows = [
        [repr(float(a)), repr(float(b)), repr(float(m)), int(c), repr(float(c / (len(s2) * w))),
         repr(float(x)), repr(float(y))]
        for a, b, m, c, w, x, y in zip(edges[:-1], edges[1:], mids, counts, widths, f_np, f_lm)
    ]

    prior_rows = [["npmle", repr(float(v)), repr(float(w))]
                  for v, w in zip(fit.prior.support, fit.prior.weights)]
    sgrid = np.geomspace(edges[0], edges[-1], args.s2_grid)
    limma_rows = []
    if not lp.is_point_mass:
        limma_rows = [[repr(float(v)), repr(float(d))] for v, d in zip(sgrid, lp.pdf(sgrid))]

    method_objs = {
        "npmle": PvalueMethod("npmle", fit.prior),
        "limma": PvalueMethod("limma", lp),
        "ttest": PvalueMethod("ttest"),
    }
    thr_rows = []
    for name, meth in method_objs.items():
        levels = [("unadjusted", args.p_threshold)]
        if result.bh_threshold[name] > 0:
            levels.append(("bh", result.bh_threshold[name]))
        for level, cut in levels:
            if not 0 < cut < 1:
                continue
            curve = rejection_threshold_curve(meth, cut, sgrid, nu)
            thr_rows += [[name, level, repr(float(cut)), repr(float(v)), repr(float(t))]
                         for v, t in zip(sgrid, curve)]

    summary = {
        "npmle": fit.to_dict(),
        "limma": lp.to_dict(),
        "bh_threshold": result.bh_threshold,
        "discoveries": result.discoveries(),
        "manifest": run_manifest(args, [args.input]),
    }
    os.makedirs(out, exist_ok=True)
    _write_csv(os.path.join(out, "histogram.csv"),
               ["bin_left", "bin_right", "bin_mid", "count", "density", "f_npmle", "f_limma"],
               hist_rows)
    _write_csv(os.path.join(out, "prior_atoms.csv"), ["method", "sigma2", "weight"], prior_rows)
    _write_csv(os.path.join(out, "limma_prior_density.csv"), ["sigma2", "density"], limma_rows)
    _write_csv(os.path.join(out, "thresholds.csv"),
               ["method", "level", "p_cutoff", "s2", "z_threshold"], thr_rows)
    _write_json(os.path.join(out, "diagnose.json"), summary)
    print(f"wrote diagnostics to {out}")
    return EXIT_OK


def _setting_from_args(args) -> SimSetting:
    if args.setting_file:
        with open(args.setting_file, encoding="utf-8") as fh:
            return SimSetting.from_dict(json.load(fh))
    return preset(
        args.preset,
        nu=args.nu,
        n=args.n,
        null_prop=args.null_prop,
        signal_law=SignalLaw(args.signal, args.signal_param),
        ordering=args.ordering,
        alpha=args.alpha,
        grid=_grid_config(args),
    )


def cmd_simulate(args) -> int:
    setting = _setting_from_args(args)
    report = monte_carlo(setting, args.replicates, args.seed, args.threads)
    report.manifest = run_manifest(args, [args.setting_file] if args.setting_file else [])
    csv_text = report.to_csv()
    json_text = report.to_json()
    with atomic_open(args.out + ".csv") as fh:
        fh.write(csv_text)
    with atomic_open(args.out + ".json") as fh:
        fh.write(json_text + "\n")
    for m, d in report.metrics.items():
        cells = " ".join(f"{k}={v.estimate:.4f}±{v.stderr:.4f}" for k, v in d.items())
        print(f"{m}: {cells}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    dataset = read_matrix(args.input, args.design, args.contrast)
    write_pairs(dataset, args.out)
    print(f"wrote {len(dataset)} pairs (nu={dataset.nu:g}, dropped={dataset.dropped})")
    return EXIT_OK


def _add_grid_flags(p):
    p.add_argument("--grid-size", type=int, default=300)
    p.add_argument("--lower-quantile", type=float, default=0.01)
    p.add_argument("--strict", action="store_true",
                   help="exit with code 3 if the NPMLE solver does not converge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partialbayes", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="NPMLE / limma / t-test p-values with BH")
    p.add_argument("input")
    p.add_argument("--df", type=float, default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--method", choices=PVALUE_METHODS + ("all",), default="all")
    p.add_argument("--out", required=True)
    _add_grid_flags(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("diagnose", help="plot-ready tables: histogram, priors, thresholds")
    p.add_argument("input")
    p.add_argument("--df", type=float, default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--s2-grid", type=int, default=200)
    p.add_argument("--p-threshold", type=float, default=0.05)
    p.add_argument("--out-dir", required=True)
    _add_grid_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="Monte-Carlo benchmark")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--setting-file")
    src.add_argument("--preset", choices=("dirac", "scaled_inv_chisq", "two_point"),
                     default="scaled_inv_chisq")
    p.add_argument("--nu", type=float, default=4)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--null-prop", type=float, default=0.9)
    p.add_argument("--signal", choices=("normal_scaled", "normal_fixed", "dirac"),
                   default="normal_scaled")
    p.add_argument("--signal-param", type=float, default=16.0)
    p.add_argument("--ordering", choices=("random", "adversarial"), default="random")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output prefix; writes <out>.json and <out>.csv")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("summarize", help="replicate matrix + design -> id,z,s2 pairs")
    p.add_argument("input")
    p.add_argument("--design", required=True)
    p.add_argument("--contrast", required=True, help="comma-separated reals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SummaryError, DomainError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
