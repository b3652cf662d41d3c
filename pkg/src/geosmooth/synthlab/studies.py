"""Replication studies on synthetic DGPs: rate curves, double robustness,
band coverage and score/Stein accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.linalg import LinAlgError

from ..core import EvaluationRegion, Grid, ObservationBatch, SeedPolicy, as_seed_policy, make_crossfit_plan, make_grid, parallel_map
from ..errors import ConfigError, GeosmoothError, WiringError
from ..estimators import (GridEstimate, default_test_class, dis_estimate, dss_estimate, plugin_estimate,
                          stein_estimate, stein_from_components, stein_population, treated_only_stein)
from ..flow import ForwardDiffusionSpec
from ..inference import density_band, inflate_band, stein_band
from ..kernels import IsotropicKernel, Kernel, LocalPCAKernel, TransportedKernel
from ..nuisance import fit_localized_regressions, fit_propensity, oracle_nuisance, perturb_nuisance
from ..scores import GaussianMixtureLaw, MixtureScore
from .dgp import SyntheticDGP, generate
from .oracles import interior_mse, ise, loglog_fit, population_density, population_gradient, rate_slope

log = logging.getLogger("geosmooth.synthlab")

KERNEL_KINDS = ("iso", "geo", "exact", "pca", "std")
METHODS = ("dis", "plugin", "naive", "dss", "stein", "stein-treated")


def parse_estimator(name: str) -> tuple[str, str]:
    """``"<method>-<kernel>"`` -> (method, kernel kind)."""
    method, _, kind = name.rpartition("-")
    if method not in METHODS or kind not in KERNEL_KINDS:
        raise ConfigError(f"unknown estimator {name!r}; use <method>-<kernel> with method in {METHODS} "
                          f"and kernel in {KERNEL_KINDS}", key="estimators")
    return method, kind


@dataclass
class GeometryContext:
    """Auxiliary information shared by all replications of a study.

    ``sample`` holds arm outcomes (evaluation coordinates) from an auxiliary
    draw disjoint from every working sample; the ``geo`` and ``pca`` kernels
    are fitted on it once.
    """

    dgp: SyntheticDGP
    arm: int
    spec: ForwardDiffusionSpec
    sample: np.ndarray | None = None
    k_nn: int = 50
    steps: int = 64

    def gaussian_fit(self) -> GaussianMixtureLaw:
        if self.sample is None:
            raise ConfigError("geometry sample required for the geo kernel", key="geometry_size")
        return GaussianMixtureLaw.gaussian(self.sample.mean(axis=0), np.cov(self.sample.T).reshape(
            self.sample.shape[1], self.sample.shape[1]))

    def kernel(self, kind: str, h: float) -> Kernel:
        dim = self.dgp.eval_dim
        if kind == "iso":
            return IsotropicKernel(h, dim)
        if kind == "std":
            return TransportedKernel(MixtureScore(GaussianMixtureLaw.standard_normal(dim), self.spec), h,
                                     self.spec, self.steps)
        if kind == "geo":
            return TransportedKernel(MixtureScore(self.gaussian_fit(), self.spec), h, self.spec, self.steps)
        if kind == "exact":
            return TransportedKernel(MixtureScore(self.dgp.counterfactual_law(self.arm), self.spec), h,
                                     self.spec, self.steps)
        if kind == "pca":
            if self.sample is None:
                raise ConfigError("geometry sample required for the pca kernel", key="geometry_size")
            return LocalPCAKernel(self.sample, h, self.k_nn, spec=self.spec)
        raise ConfigError(f"unknown kernel kind {kind!r}", key="kernel")


def geometry_context(dgp: SyntheticDGP, arm: int, seed, size: int = 0, k_nn: int = 50,
                     spec: ForwardDiffusionSpec | None = None, steps: int = 64) -> GeometryContext:
    sample = None
    if size > 0:
        aux = generate(dgp, size, seed, stream="geometry")
        sample = aux.projected(dgp.projection).y[aux.a == arm]
    return GeometryContext(dgp, arm, spec or ForwardDiffusionSpec(), sample, k_nn, steps)


def study_region(dgp: SyntheticDGP, size: int, seed, grid_points_per_axis: int, margin: float = 0.1,
                 arm: int | None = None) -> EvaluationRegion:
    """Bounding box of a pilot sample's (projected) outcomes, fixed across n."""
    pilot = generate(dgp, size, seed, stream="region")
    y = pilot.y if arm is None else pilot.y[pilot.a == arm]
    return EvaluationRegion.bounding_box(y, grid_points_per_axis, margin, dgp.projection)


def bandwidth(rule: dict, n: int) -> float:
    if "fixed" in rule:
        return float(rule["fixed"])
    return float(rule.get("c", 1.0) * n ** rule.get("exponent", -0.2))


# ---------------------------------------------------------------------------
# replication machinery

@dataclass
class ReplicationOutcome:
    errors: dict
    failed: str | None = None
    extras: dict = field(default_factory=dict)


def _fit_nuisance(mode, dgp, batch, arm, plan, kernel, grid, with_grad, propensity, ridge, clip):
    if mode == "oracle":
        return oracle_nuisance(dgp, batch, arm, kernel, grid, with_grad)
    return fit_localized_regressions(batch, arm, plan, kernel, grid, ridge, with_grad, propensity, clip)


@dataclass
class RateStudy:
    curves: dict
    errors: dict
    failures: dict
    h: dict
    n_list: list


def rate_study(dgp: SyntheticDGP, arm: int, n_list: Sequence[int], reps: int, estimators: Sequence[str],
               bandwidth_rule: dict, grid: Grid, seed, geometry: GeometryContext, nuisance: str = "fitted",
               folds: int = 5, ridge: float | None = None, clip: float = 0.05, workers: int = 1,
               stein_fields=None) -> RateStudy:
    """Error of every estimator against its own smoothed population target, per n.

    Density methods report ISE, ``dss`` the interior mean squared score error
    and Stein methods the mean squared error over the test class.
    """
    policy = as_seed_policy(seed)
    parsed = {name: parse_estimator(name) for name in estimators}
    kinds = sorted({k for _, k in parsed.values()})
    needs_grad = {k for m, k in parsed.values() if m in ("dss", "stein", "stein-treated")}
    fields = stein_fields or default_test_class(grid.dim, policy.child("test-fields").master_seed)
    kernels, targets = {}, {}
    h_of = {}
    for n in n_list:
        h = bandwidth(bandwidth_rule, n)
        h_of[n] = h
        for kind in kinds:
            kern = geometry.kernel(kind, h)
            kernels[kind, n] = kern
            P = population_density(dgp, arm, kern, grid)
            tgt = {"density": P}
            if kind in needs_grad:
                Gp = population_gradient(dgp, arm, kern, grid)
                tgt["score"] = Gp / P[:, None]
                tgt["stein"] = stein_population(P, Gp, grid, fields)
            targets[kind, n] = (kern, tgt)

    jobs = [(n, r) for n in n_list for r in range(reps)]

    def one(job):
        n, r = job
        try:
            batch = generate(dgp, n, policy, index=(r,)).projected(dgp.projection)
            plan = make_crossfit_plan(n, folds, policy.child("folds", n, r))
            prop = fit_propensity(batch, arm, plan, clip) if nuisance == "fitted" else None
            nuis = {}
            out = {}
            for name, (method, kind) in parsed.items():
                kern = kernels[kind, n]
                tkern, tgt = targets[kind, n]
                if tkern is not kern:
                    raise WiringError(f"{name}: target built with a different kernel")
                if method in ("dis", "dss", "stein"):
                    key = (kind, kind in needs_grad)
                    if key not in nuis:
                        nuis[key] = _fit_nuisance(nuisance, dgp, batch, arm, plan, kern, grid,
                                                  kind in needs_grad, prop, ridge, clip)
                    nz = nuis[key]
                if method == "dis":
                    out[name] = ise(dis_estimate(batch, arm, nz, kern, grid), tgt["density"], grid)
                elif method in ("plugin", "naive"):
                    kappa = None
                    pi = (prop.pi_hat if prop is not None else dgp.propensity(batch.x, arm))
                    est = plugin_estimate(batch, arm, pi, kern, grid, "ipw" if method == "plugin" else "ipw-free",
                                          kappa=kappa)
                    out[name] = ise(est, tgt["density"], grid)
                elif method == "dss":
                    est = dss_estimate(batch, arm, nz, kern, grid)
                    out[name] = interior_mse(est.values, tgt["score"], grid)
                elif method == "stein":
                    vals = np.array([e.value for e in stein_estimate(batch, arm, nz, kern, grid, fields)])
                    out[name] = float(np.mean((vals - tgt["stein"]) ** 2))
                else:
                    vals = np.array([e.value for e in treated_only_stein(batch, arm, kern, grid, fields)])
                    out[name] = float(np.mean((vals - tgt["stein"]) ** 2))
            return ReplicationOutcome(out)
        except (GeosmoothError, LinAlgError, FloatingPointError) as exc:
            log.warning("replication n=%d r=%d failed: %s", n, r, exc)
            return ReplicationOutcome({}, failed=f"{type(exc).__name__}: {exc}")

    results = parallel_map(one, jobs, workers)
    errors = {name: {n: [] for n in n_list} for name in estimators}
    failures = {n: 0 for n in n_list}
    for (n, _), res in zip(jobs, results):
        if res.failed:
            failures[n] += 1
            continue
        for name, v in res.errors.items():
            errors[name][n].append(v)
    curves = {}
    for name in estimators:
        means = np.array([np.mean(errors[name][n]) if errors[name][n] else np.nan for n in n_list])
        ses = np.array([np.std(errors[name][n], ddof=1) / np.sqrt(len(errors[name][n]))
                        if len(errors[name][n]) > 1 else np.nan for n in n_list])
        if len(n_list) >= 3 and np.all(np.isfinite(means)) and np.all(means > 0):
            curves[name] = rate_slope(n_list, means, ses, label=name)
        else:
            curves[name] = None
    return RateStudy(curves, errors, failures, h_of, list(n_list))


# ---------------------------------------------------------------------------
# double robustness

@dataclass
class DoubleRobustnessResult:
    eps: np.ndarray
    bias_onestep: np.ndarray
    bias_plugin: np.ndarray
    slope_onestep: float
    slope_plugin: float
    reps: int


def double_robustness_study(dgp: SyntheticDGP, arm: int, n: int, reps: int, eps_list: Sequence[float],
                            kernel: Kernel, grid: Grid, seed, workers: int = 1) -> DoubleRobustnessResult:
    """Bias of one-step vs weighting-only estimators under jointly perturbed nuisances.

    Nuisances start from the exact DGP values and are perturbed by
    :func:`~geosmooth.nuisance.perturb_nuisance`. The same data are reused
    for every ``eps``; since the unperturbed one-step estimator is exactly
    unbiased, the replication mean of ``estimate(eps) - estimate(0)``
    estimates the bias at ``eps``. Bias size is the grid L2 norm.
    """
    policy = as_seed_policy(seed)
    eps_list = np.asarray(eps_list, dtype=float)

    def one(r):
        batch = generate(dgp, n, policy, index=(r,)).projected(dgp.projection)
        base = oracle_nuisance(dgp, batch, arm, kernel, grid)
        p0 = dis_estimate(batch, arm, base, kernel, grid).values
        rows_o, rows_p = [], []
        for e in eps_list:
            pert = perturb_nuisance(base, batch.x, e)
            rows_o.append(dis_estimate(batch, arm, pert, kernel, grid).values - p0)
            rows_p.append(plugin_estimate(batch, arm, pert.pi_hat, kernel, grid, "ipw",
                                          kappa=base.kappa).values - p0)
        return np.array(rows_o), np.array(rows_p)

    res = parallel_map(one, range(reps), workers)
    mean_o = np.mean([r[0] for r in res], axis=0)
    mean_p = np.mean([r[1] for r in res], axis=0)
    norm = lambda b: np.sqrt((b**2) @ grid.weights)
    bo, bp = norm(mean_o), norm(mean_p)
    return DoubleRobustnessResult(eps_list, bo, bp, loglog_fit(eps_list, bo), loglog_fit(eps_list, bp), reps)


# ---------------------------------------------------------------------------
# coverage

@dataclass
class CoverageResult:
    coverage: float
    coverage_inflated: float | None
    reps: int
    c_hat: np.ndarray
    covered: np.ndarray
    covered_inflated: np.ndarray | None = None
    envelope: float | np.ndarray = 0.0


def band_coverage_study(dgp: SyntheticDGP, arm: int, n: int, reps: int, kernel: Kernel, grid: Grid, seed,
                        alpha: float = 0.05, B: int = 1000, target=None, envelope=None, folds: int = 5,
                        ridge=None, clip: float = 0.05, nuisance: str = "fitted",
                        workers: int = 1) -> CoverageResult:
    """Simultaneous coverage of DIS bands for ``target`` (default: the kernel's own population density).

    With ``envelope`` the inflated band is evaluated on the same replications.
    """
    policy = as_seed_policy(seed)
    if target is None:
        target = population_density(dgp, arm, kernel, grid)

    def one(r):
        batch = generate(dgp, n, policy, index=(r,)).projected(dgp.projection)
        plan = make_crossfit_plan(n, folds, policy.child("folds", n, r))
        nz = _fit_nuisance(nuisance, dgp, batch, arm, plan, kernel, grid, False, None, ridge, clip)
        est = dis_estimate(batch, arm, nz, kernel, grid)
        band = density_band(est, alpha, B, policy.child("multipliers", n, r))
        inflated = inflate_band(band, envelope).covers(target) if envelope is not None else None
        return band.c_hat, band.covers(target), inflated

    res = parallel_map(one, range(reps), workers)
    c = np.array([r[0] for r in res])
    cov = np.array([r[1] for r in res])
    inf = np.array([r[2] for r in res]) if envelope is not None else None
    return CoverageResult(float(cov.mean()), None if inf is None else float(inf.mean()), reps, c, cov, inf,
                          0.0 if envelope is None else envelope)


def stein_coverage_study(dgp: SyntheticDGP, arm: int, n: int, reps: int, kernel: Kernel, grid: Grid, seed,
                         fields=None, alpha: float = 0.05, B: int = 1000, folds: int = 5, ridge=None,
                         clip: float = 0.05, nuisance: str = "fitted", workers: int = 1) -> CoverageResult:
    """Simultaneous coverage over a test class of the one-step Stein band."""
    policy = as_seed_policy(seed)
    fields = fields or default_test_class(grid.dim, 0)
    P = population_density(dgp, arm, kernel, grid)
    Gp = population_gradient(dgp, arm, kernel, grid)
    target = stein_population(P, Gp, grid, fields)

    def one(r):
        batch = generate(dgp, n, policy, index=(r,)).projected(dgp.projection)
        plan = make_crossfit_plan(n, folds, policy.child("folds", n, r))
        nz = _fit_nuisance(nuisance, dgp, batch, arm, plan, kernel, grid, True, None, ridge, clip)
        ests = stein_estimate(batch, arm, nz, kernel, grid, fields)
        band = stein_band(ests, alpha, B, policy.child("multipliers", n, r))
        return band.c_hat, band.covers(target)

    res = parallel_map(one, range(reps), workers)
    c = np.array([r[0] for r in res])
    cov = np.array([r[1] for r in res])
    return CoverageResult(float(cov.mean()), None, reps, c, cov)


# ---------------------------------------------------------------------------
# score accuracy

def dss_accuracy_study(dgp: SyntheticDGP, arm: int, n_list: Sequence[int], reps: int, kernel: Kernel,
                       grid: Grid, seed, folds: int = 5, ridge=None, clip: float = 0.05,
                       nuisance: str = "fitted", interior: float = 0.6, workers: int = 1) -> dict:
    """Interior mean squared error of DSS at a fixed kernel, per n."""
    policy = as_seed_policy(seed)
    P = population_density(dgp, arm, kernel, grid)
    target = population_gradient(dgp, arm, kernel, grid) / P[:, None]
    jobs = [(n, r) for n in n_list for r in range(reps)]

    def one(job):
        n, r = job
        batch = generate(dgp, n, policy, index=(r,)).projected(dgp.projection)
        plan = make_crossfit_plan(n, folds, policy.child("folds", n, r))
        nz = _fit_nuisance(nuisance, dgp, batch, arm, plan, kernel, grid, True, None, ridge, clip)
        return interior_mse(dss_estimate(batch, arm, nz, kernel, grid).values, target, grid, interior)

    res = parallel_map(one, jobs, workers)
    out = {}
    for n in n_list:
        vals = np.array([v for (m, _), v in zip(jobs, res) if m == n])
        out[n] = (float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0)
    return out
