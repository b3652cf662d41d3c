"""End-to-end experiment runner: rate curves, band coverage, peakiness and
drift tables written as CSV/SVG with a reproducibility manifest."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import EvaluationRegion, as_seed_policy, dump_json, grid_from_points, make_grid
from ..errors import ConfigError
from ..flow import ForwardDiffusionSpec
from ..kernels import TransportedKernel, peakiness
from ..plots import Series, line_plot_svg, peakiness_svg
from ..scores import MixtureScore, PerturbedScore
from .dgp import make_preset, positivity_audit
from .oracles import drift_diagnostic, population_density
from .studies import band_coverage_study, geometry_context, parse_estimator, rate_study, study_region

log = logging.getLogger("geosmooth.experiment")

EXPERIMENT_DEFAULTS = {
    "preset": "gauss2d",
    "confounding": None,
    "thin_scale": None,
    "arm": 1,
    "n_list": [500, 1000, 2000],
    "replications": 5,
    "estimators": ["dis-iso", "plugin-iso", "dis-geo"],
    "bandwidth": {"c": 1.0, "exponent": -0.2},
    "grid_points_per_axis": 20,
    "margin": 0.1,
    "region": None,
    "region_pilot_size": 20000,
    "nuisance": "fitted",
    "folds": 5,
    "ridge": None,
    "clip": 0.05,
    "geometry_size": 20000,
    "k_nn": 50,
    "flow_steps": 64,
    "beta0": 1.0,
    "beta1": None,
    "time_power": 2.0,
    "seed": 0,
    "workers": 1,
    "band": {"estimator": "dis-iso", "n": 1000, "replications": 10, "alpha": 0.05, "B": 200, "h": None,
             "shrink": 0.2, "min_density": 0.25},
    "peakiness": {"kernels": ["iso", "geo"], "h": [0.1, 0.15, 0.2, 0.3, 0.4], "samples": 100},
    "drift": {"h": [0.15, 0.2, 0.3, 0.4], "eps": [0.05, 0.1, 0.2], "samples": 5000, "mode": "linear-tilt",
              "time_scaling": "noise"},
}

SECTION_KEYS = {
    "bandwidth": {"c", "exponent", "fixed"},
    "region": {"lower", "upper"},
    "band": set(EXPERIMENT_DEFAULTS["band"]),
    "peakiness": set(EXPERIMENT_DEFAULTS["peakiness"]),
    "drift": set(EXPERIMENT_DEFAULTS["drift"]),
}


def merge_config(defaults: dict, user: dict, sections: dict | None = None) -> dict:
    """Overlay ``user`` on ``defaults``; unknown keys raise ``ConfigError`` naming the key."""
    sections = sections or {}
    out = copy.deepcopy(defaults)
    for key, value in (user or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
        if key in sections and isinstance(value, dict):
            for sub in value:
                if sub not in sections[key]:
                    raise ConfigError(f"unknown configuration key {key}.{sub!r}", key=f"{key}.{sub}")
            base = out.get(key) if isinstance(out.get(key), dict) else {}
            merged = dict(base or {})
            merged.update(value)
            if key == "bandwidth" and "fixed" in value:
                merged = {"fixed": value["fixed"]}
            out[key] = merged
        else:
            out[key] = copy.deepcopy(value)
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def versions() -> dict:
    import scipy

    from .. import __version__

    return {"geosmooth": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


@dataclass
class ExperimentResult:
    config: dict
    curves: dict
    rate: object
    bands: list = field(default_factory=list)
    peakiness: dict = field(default_factory=dict)
    drift: object = None
    files: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def run_experiment(config: dict, out_dir=None, workers: int | None = None, command=None) -> ExperimentResult:
    """Run the configured experiment; writes outputs when ``out_dir`` is given.

    ``workers`` overrides the configured worker count without entering the
    recorded configuration, since results do not depend on it.
    """
    cfg = merge_config(EXPERIMENT_DEFAULTS, config, SECTION_KEYS)
    nworkers = int(cfg["workers"] if workers is None else workers)
    for name in cfg["estimators"]:
        parse_estimator(name)
    n_list = [int(n) for n in cfg["n_list"]]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list must be strictly increasing", key="n_list")
    if int(cfg["replications"]) < 1:
        raise ConfigError("replications must be >= 1", key="replications")
    policy = as_seed_policy(int(cfg["seed"]))
    dgp = make_preset(cfg["preset"], cfg["confounding"], cfg["thin_scale"])
    arm = int(cfg["arm"])
    spec = ForwardDiffusionSpec(cfg["beta0"], cfg["beta1"], cfg["time_power"])
    if cfg["region"]:
        region = EvaluationRegion(cfg["region"]["lower"], cfg["region"]["upper"], cfg["grid_points_per_axis"])
    else:
        region = study_region(dgp, int(cfg["region_pilot_size"]), policy, int(cfg["grid_points_per_axis"]),
                              float(cfg["margin"]))
    grid = make_grid(region)
    geometry = geometry_context(dgp, arm, policy, int(cfg["geometry_size"]), int(cfg["k_nn"]), spec,
                                int(cfg["flow_steps"]))
    log.info("experiment preset=%s n=%s reps=%s", cfg["preset"], n_list, cfg["replications"])
    rate = rate_study(dgp, arm, n_list, int(cfg["replications"]), cfg["estimators"], cfg["bandwidth"], grid,
                      policy.child("rate"), geometry, cfg["nuisance"], int(cfg["folds"]), cfg["ridge"],
                      float(cfg["clip"]), nworkers)
    result = ExperimentResult(cfg, rate.curves, rate, failures=rate.failures)

    band_cfg = cfg["band"]
    if band_cfg:
        method, kind = parse_estimator(band_cfg["estimator"])
        if method != "dis":
            raise ConfigError("bands are computed for dis estimators", key="band.estimator")
        n_b = int(band_cfg["n"])
        h_b = band_cfg.get("h") or (cfg["bandwidth"]["fixed"] if "fixed" in cfg["bandwidth"]
                                    else cfg["bandwidth"].get("c", 1.0) * n_b ** cfg["bandwidth"].get("exponent", -0.2))
        kern = geometry.kernel(kind, float(h_b))
        # near-empty tail points break the normal approximation, so bands use a
        # shrunken box restricted to where the target density is non-negligible
        lo, hi = np.asarray(region.lower, float), np.asarray(region.upper, float)
        shrink = float(band_cfg["shrink"]) * (hi - lo)
        box = make_grid(EvaluationRegion(lo + shrink, hi - shrink, int(cfg["grid_points_per_axis"])))
        dens = population_density(dgp, arm, kern, box)
        keep = dens >= float(band_cfg["min_density"]) * dens.max()
        band_grid = grid_from_points(box.points[keep], box.weights[keep])
        cov = band_coverage_study(dgp, arm, n_b, int(band_cfg["replications"]), kern, band_grid, policy.child("band"),
                                  float(band_cfg["alpha"]), int(band_cfg["B"]), folds=int(cfg["folds"]),
                                  ridge=cfg["ridge"], clip=float(cfg["clip"]), nuisance=cfg["nuisance"],
                                  workers=nworkers)
        result.bands = [(band_cfg["estimator"], n_b, r, float(cov.c_hat[r]), bool(cov.covered[r]))
                        for r in range(cov.reps)]

    peak_cfg = cfg["peakiness"]
    if peak_cfg:
        law = dgp.counterfactual_law(arm)
        samples = law.sample(int(peak_cfg["samples"]), policy.generator("peakiness-samples"))
        for kind in peak_cfg["kernels"]:
            result.peakiness[kind] = peakiness(lambda h, k=kind: geometry.kernel(k, h), peak_cfg["h"], samples, grid)

    drift_cfg = cfg["drift"]
    if drift_cfg:
        law = dgp.counterfactual_law(arm)
        base = MixtureScore(law, spec)
        samples = law.sample(int(drift_cfg["samples"]), policy.generator("drift-samples"))
        steps = int(cfg["flow_steps"])
        result.drift = drift_diagnostic(
            lambda h: TransportedKernel(base, h, spec, steps),
            lambda h, e: TransportedKernel(PerturbedScore(base, e, drift_cfg["mode"],
                                                          time_scaling=drift_cfg["time_scaling"], spec=spec),
                                           h, spec, steps),
            samples, grid, drift_cfg["h"], drift_cfg["eps"])

    if out_dir is not None:
        result.files = write_experiment(result, out_dir, command)
    return result


def write_experiment(result: ExperimentResult, out_dir, command=None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    rate = result.rate
    with open(out / "curves.csv", "w", encoding="utf-8") as fh:
        fh.write("estimator,n,h,replications,failed,mean_error,se_error,slope,slope_se\n")
        for name in result.config["estimators"]:
            curve = rate.curves.get(name)
            for i, n in enumerate(rate.n_list):
                errs = rate.errors[name][n]
                mean = float(np.mean(errs)) if errs else float("nan")
                se = float(np.std(errs, ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else float("nan")
                fh.write(",".join([name, str(n), _fmt(rate.h[n]), str(len(errs)), str(rate.failures[n]),
                                   _fmt(mean), _fmt(se), _fmt(curve.slope if curve else None),
                                   _fmt(curve.slope_se if curve else None)]) + "\n")
    files.append("curves.csv")
    series = []
    for name in result.config["estimators"]:
        means = [np.mean(rate.errors[name][n]) if rate.errors[name][n] else np.nan for n in rate.n_list]
        curve = rate.curves.get(name)
        fit = (curve.slope, curve.intercept / np.log(10)) if curve else None
        series.append(Series(name, rate.n_list, means, fit))
    line_plot_svg(series, out / "curves.svg", "error versus sample size", "n", "error")
    files.append("curves.svg")

    with open(out / "bands.csv", "w", encoding="utf-8") as fh:
        fh.write("estimator,n,replication,c_hat,covered\n")
        for est, n, r, c, covd in result.bands:
            fh.write(f"{est},{n},{r},{c!r},{int(covd)}\n")
    files.append("bands.csv")

    with open(out / "peakiness.csv", "w", encoding="utf-8") as fh:
        fh.write("kernel,h,H,Hs,d_eff\n")
        for kind, rep in result.peakiness.items():
            for i in range(rep.h.size):
                hs = "" if rep.Hs is None else _fmt(rep.Hs[i])
                fh.write(f"{kind},{_fmt(rep.h[i])},{_fmt(rep.H[i])},{hs},{_fmt(rep.d_eff[i])}\n")
    files.append("peakiness.csv")
    if result.peakiness:
        pseries = []
        for kind, rep in result.peakiness.items():
            inv = 1.0 / rep.h
            icept = float(np.mean(np.log10(rep.H) - rep.slope * np.log10(inv)))
            pseries.append(Series(kind, inv, rep.H, (rep.slope, icept)))
        line_plot_svg(pseries, out / "peakiness.svg", "kernel peakiness", "1/h", "H")
        files.append("peakiness.svg")

    if result.drift is not None:
        result.drift.to_csv(out / "drift.csv")
        dseries = []
        for j, e in enumerate(result.drift.eps):
            dseries.append(Series(f"eps={e:g}", 1.0 / result.drift.h, result.drift.sup_drift[:, j]))
        line_plot_svg(dseries, out / "drift.svg", "kernel drift", "1/h", "sup L2 drift")
        files.append("drift.svg")
    else:
        with open(out / "drift.csv", "w", encoding="utf-8") as fh:
            fh.write("h,eps,drift_sup,drift_mean,bias_sup\n")
    files.append("drift.csv")

    manifest = {
        "command": command or "experiment",
        "config": result.config,
        "config_hash": config_hash(result.config),
        "seed": result.config["seed"],
        "versions": versions(),
        "outputs": sorted(files),
        "failures": {str(k): v for k, v in result.failures.items()},
    }
    dump_json(manifest, out / "manifest.json")
    files.append("manifest.json")
    return files
