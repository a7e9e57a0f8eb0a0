"""Plausibility-aware counterfactual explanations for tabular ReLU
classifiers, solved exactly as one mixed-integer linear program with a
sum-product density network supplying the likelihood."""

__version__ = "0.1.0"

from .encoding import TabularEncoder, mad_weights, normalize
from .engine import CounterfactualExplainer, VariantConfig, compute_threshold, run_benchmark
from .formulation import CeConstraints, build_ce_model
from .nn import Mlp, forward_raw, interval_bounds, load_mlp, save_mlp
from .schema import DatasetSchema, FeatureSpec, load_schema, save_schema
from .spn import (
    Spn,
    load_spn,
    log_likelihood,
    log_likelihood_max_approx,
    marginal_log_likelihood,
    save_spn,
    validate,
)
from .spn_learn import LearnConfig, SpnDensityEstimator, learn

__all__ = [
    "CeConstraints",
    "CounterfactualExplainer",
    "DatasetSchema",
    "FeatureSpec",
    "LearnConfig",
    "Mlp",
    "Spn",
    "SpnDensityEstimator",
    "TabularEncoder",
    "VariantConfig",
    "build_ce_model",
    "compute_threshold",
    "forward_raw",
    "interval_bounds",
    "learn",
    "load_mlp",
    "load_schema",
    "load_spn",
    "log_likelihood",
    "log_likelihood_max_approx",
    "mad_weights",
    "marginal_log_likelihood",
    "normalize",
    "run_benchmark",
    "save_mlp",
    "save_schema",
    "save_spn",
    "validate",
]
