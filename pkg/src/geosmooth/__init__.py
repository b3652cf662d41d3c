"""Geometry-adaptive smoothing for counterfactual densities and scores.

Diffusion-transported kernels, cross-fitted one-step estimators of smoothed
counterfactual densities and scores, multiplier bootstrap bands, and a
synthetic laboratory for checking them.
"""

__version__ = "0.1.0"

from .core import (CrossFitPlan, EvaluationRegion, Grid, ObservationBatch, SeedPolicy, make_crossfit_plan,
                   make_grid, read_batch_csv, write_batch_csv)
from .errors import ConfigError, GeosmoothError
from .estimators import (GridEstimate, SteinEstimate, default_test_class, dis_estimate, dss_estimate,
                         plugin_estimate, reference_proxy, stein_estimate, treated_only_stein)
from .flow import ForwardDiffusionSpec, forward_transition, reverse_flow
from .inference import BandResult, inflate_band, multiplier_band, stein_band
from .kernels import (GaussianKernel, IsotropicKernel, LocalPCAKernel, TransportedKernel, kernel_eval,
                      kernel_grad, kernel_moments, kernel_sample, peakiness)
from .nuisance import CrossFitNuisance, fit_localized_regressions, fit_propensity, oracle_nuisance
from .scores import GaussianMixtureLaw, MixtureScore, PerturbedScore, diffused_mixture, mixture_score, perturb_score

__all__ = [
    "CrossFitPlan", "EvaluationRegion", "Grid", "ObservationBatch", "SeedPolicy", "make_crossfit_plan",
    "make_grid", "read_batch_csv", "write_batch_csv", "ConfigError", "GeosmoothError", "GridEstimate",
    "SteinEstimate", "default_test_class", "dis_estimate", "dss_estimate", "plugin_estimate",
    "reference_proxy", "stein_estimate", "treated_only_stein", "ForwardDiffusionSpec", "forward_transition",
    "reverse_flow", "BandResult", "inflate_band", "multiplier_band", "stein_band", "GaussianKernel",
    "IsotropicKernel", "LocalPCAKernel", "TransportedKernel", "kernel_eval", "kernel_grad", "kernel_moments",
    "kernel_sample", "peakiness", "CrossFitNuisance", "fit_localized_regressions", "fit_propensity",
    "oracle_nuisance", "GaussianMixtureLaw", "MixtureScore", "PerturbedScore", "diffused_mixture",
    "mixture_score", "perturb_score",
]
