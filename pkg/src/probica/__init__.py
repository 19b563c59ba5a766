"""Probabilistic ICA fitted by stochastic approximation EM."""
from .distributions import (
    coordinate_groups,
    eg_tail_survival,
    expected_log_complete,
    extract_stats,
    log_complete,
    log_prior,
    m_step,
    mean_stats,
    sample_prior,
)
from .estimators import (
    FitError,
    FitTrace,
    SaemConfig,
    Truncation,
    famem_fit,
    ifa_em_fit,
    ifa_exact_estep,
    ifa_observed_loglik,
    init_params,
    mcem_fit,
    saem_fit,
)
from .evaluation import (
    Scenario,
    align,
    alpha_vs_p_study,
    bg_cross_square,
    convergence_time,
    generate,
    hotelling_permutation_test,
    intervals8,
    run_benchmark,
)
from .model import Dataset, HiddenState, Kind, ModelError, ModelSpec, Parameters, SuffStats, validate
from .reconstruction import ReconOptions, ReconResult, reconstruct
from .sampler import ChainState, gibbs_sweep, mh_ratio, posterior_mean_stats

__version__ = "0.1.0"
