"""Synthetic confounded data, population oracles and replication studies."""

from .dgp import PRESETS, OutcomeComponent, SyntheticDGP, generate, make_preset, positivity_audit
from .oracles import (DriftTable, RateCurve, drift_diagnostic, interior_mse, ise, loglog_fit,
                      population_density, population_gradient, population_score, rate_slope)
from .experiment import EXPERIMENT_DEFAULTS, ExperimentResult, merge_config, run_experiment
from .studies import (GeometryContext, band_coverage_study, bandwidth, double_robustness_study,
                      dss_accuracy_study, geometry_context, parse_estimator, rate_study,
                      stein_coverage_study, study_region)

__all__ = [
    "PRESETS", "OutcomeComponent", "SyntheticDGP", "generate", "make_preset", "positivity_audit",
    "DriftTable", "RateCurve", "drift_diagnostic", "interior_mse", "ise", "loglog_fit",
    "population_density", "population_gradient", "population_score", "rate_slope",
    "GeometryContext", "band_coverage_study", "bandwidth", "double_robustness_study",
    "dss_accuracy_study", "geometry_context", "parse_estimator", "rate_study",
    "stein_coverage_study", "study_region",
    "EXPERIMENT_DEFAULTS", "ExperimentResult", "merge_config", "run_experiment",
]
