"""Empirical partially Bayes multiple testing for normal means with estimated variances."""

__version__ = "0.1.0"

from .mtp import RejectionResult, bh_adjust, bh_reject, storey_pi0, storey_reject
from .npmle import (
    GridConfig,
    NpmleFit,
    SolverConfig,
    build_grid,
    fit_npmle,
    hellinger_distance,
    kkt_gap,
    log_marginal_likelihood,
    marginal_density,
)
from .priors import DiscretePrior, LimmaPrior
from .pvalues import (
    PvalueMethod,
    conditional_pvalue,
    conditional_pvalue_integral,
    fit_limma,
    limma_pvalue,
    rejection_threshold_curve,
    ttest_pvalue,
    tweedie_precision,
)
from .summarize import SummaryDataset, SummaryPair, read_matrix, read_pairs, summarize_contrast, write_pairs
