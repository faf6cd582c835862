"""Honest causal forests for multi-valued treatments with weight-based inference."""
from .causal_forest import ForestParams, build_forest, compute_weights, honest_weights
from .effects import EffectTable, GateTable, IateResult, estimate_ate, estimate_gates, estimate_iates, fit
from .errors import DataError, NumericalError, SupportError, UsageError
from .heterogeneity import cluster_profile, gate_minus_ate_tests, kmeanspp_cluster, wald_equality
from .placebo import draw_matched_sample, impute_potential_visits, placebo_verdict, run_placebo
from .report import relative_effect
from .sample import ARM_NAMES, EstimationSample
from .synthetic_dgp import DgpConfig, generate, true_aggregate, true_iate

__version__ = "0.1.0"

__all__ = [
    "ARM_NAMES", "DataError", "DgpConfig", "EffectTable", "EstimationSample", "ForestParams",
    "GateTable", "IateResult", "NumericalError", "SupportError", "UsageError", "build_forest",
    "cluster_profile", "compute_weights", "draw_matched_sample", "estimate_ate", "estimate_gates",
    "estimate_iates", "fit", "gate_minus_ate_tests", "generate", "honest_weights",
    "impute_potential_visits", "kmeanspp_cluster", "placebo_verdict", "relative_effect",
    "run_placebo", "true_aggregate", "true_iate", "wald_equality",
]
