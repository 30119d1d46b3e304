"""Federated regression with missing data.

Sites exchange only summaries (weighted cross-products, aggregated
counts, model coefficients and score/Jacobian sums) with a coordinator,
which reproduces the pooled complete-case or inverse-probability-weighted
fit and its stacked sandwich variance.
"""
from .datamodel import (
    EstimatorChoice, MissingnessTarget, ModelSpec, SiteDataset, WeightingFormula, concat_sites,
    load_site_csv, write_site_csv,
)
from .estimators import FitResult, combine_glm, combine_linear, site_counts, site_suffstats
from .exceptions import FedMissError
from .fedproto import KnownWeights, SuppressionPolicy, Transcript, privacy_audit, replay, run_protocol
from .missingness import MechanismSpec, ScenarioSpec, apply_missingness
from .simharness import SimConfig, SimMetrics, emit_results, run_simulation
from .variance import StackedVariance, alt_variance_check, assemble_stacked, site_variance_blocks
from .weights import CandidateModel, CandidateSet, SiteWeighting, calibrate, fit_nuisance

__version__ = "0.1.0"

__all__ = [
    "CandidateModel", "CandidateSet", "EstimatorChoice", "FedMissError", "FitResult", "KnownWeights",
    "MechanismSpec", "MissingnessTarget", "ModelSpec", "ScenarioSpec", "SimConfig", "SimMetrics",
    "SiteDataset", "SiteWeighting", "StackedVariance", "SuppressionPolicy", "Transcript", "WeightingFormula",
    "alt_variance_check", "apply_missingness", "assemble_stacked", "calibrate", "combine_glm",
    "combine_linear", "concat_sites", "emit_results", "fit_nuisance", "load_site_csv", "privacy_audit",
    "replay", "run_protocol", "run_simulation", "site_counts", "site_suffstats", "site_variance_blocks",
    "write_site_csv",
]
