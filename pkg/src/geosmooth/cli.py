"""``geosmooth`` command-line interface.

Every subcommand reads an optional JSON configuration (``--config``), applies
``--set key=value`` overrides (values parsed as JSON when possible), rejects
unknown keys, and writes a manifest holding the full effective configuration
next to its outputs. A manifest can be passed back as ``--config`` to rerun.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import (EvaluationRegion, as_seed_policy, dump_json, load_json, make_crossfit_plan, make_grid,
                   read_batch_csv, write_batch_csv)
from .errors import ConfigError, GeosmoothError
from .estimators import (default_test_class, dis_estimate, dss_estimate, stein_estimate, treated_only_stein,
                         write_stein_csv)
from .flow import ForwardDiffusionSpec
from .inference import density_band, inflate_band, stein_band
from .kernels import GaussianKernel, IsotropicKernel, LocalPCAKernel, TransportedKernel, peakiness
from .nuisance import fit_localized_regressions
from .plots import Series, line_plot_svg
from .scores import GaussianMixtureLaw, MixtureScore, PerturbedScore
from .synthlab.dgp import generate, make_preset
from .synthlab.experiment import EXPERIMENT_DEFAULTS, SECTION_KEYS, merge_config, run_experiment, versions
from .synthlab.oracles import drift_diagnostic

log = logging.getLogger("geosmooth")

FLOW_KEYS = {"flow_steps": 64, "beta0": 1.0, "beta1": None, "time_power": 2.0}

SIMULATE_DEFAULTS = {"preset": "gauss2d", "n": 1000, "seed": 0, "confounding": None, "thin_scale": None}

ESTIMATE_DEFAULTS = {
    "arm": 1, "labels": [0, 1],
    "kernel": "iso", "h": 0.3, "cov": None,
    "geometry": "standard-normal", "geometry_data": None, "perturbation": None,
    "k_nn": 50, "pca_ridge": None, "anchor": "evaluation",
    "lower": None, "upper": None, "grid_points_per_axis": 20, "projection": None, "margin": 0.1,
    "folds": 5, "ridge": None, "clip": 0.05, "features": "affine", "seed": 0,
    **FLOW_KEYS,
}
STEIN_KEYS = {"n_random": 4, "field_center": None, "field_scale": 1.0, "baseline": "one-step"}
DSS_DEFAULTS = {**ESTIMATE_DEFAULTS, "floor": None}
STEIN_DEFAULTS = {**ESTIMATE_DEFAULTS, **STEIN_KEYS}
BAND_DEFAULTS = {**ESTIMATE_DEFAULTS, **STEIN_KEYS, "alpha": 0.05, "B": 1000, "envelope": 0.0, "target": "density",
                 "margin": -0.2, "grid_points_per_axis": 12}

PEAKINESS_DEFAULTS = {
    "kernels": ["iso"], "h": [0.05, 0.1, 0.2, 0.4], "samples": 200, "preset": "gauss2d", "arm": 1,
    "include_score": False, "d_star": 1, "seed": 0,
    "geometry": "counterfactual", "k_nn": 50, "pca_ridge": None,
    "lower": None, "upper": None, "grid_points_per_axis": 60, "margin": 0.1,
    **FLOW_KEYS,
}

DRIFT_DEFAULTS = {
    "preset": "diffuse2d", "arm": 1, "geometry": "counterfactual",
    "h": [0.1, 0.14, 0.2, 0.28, 0.4], "eps": [0.02, 0.05, 0.1, 0.2], "samples": 20000,
    "mode": "linear-tilt", "time_scaling": "noise", "lower": None, "upper": None,
    "grid_points_per_axis": 3, "seed": 0, **FLOW_KEYS,
}

COMMANDS = {
    "simulate": (SIMULATE_DEFAULTS, "draw a synthetic confounded sample and write it as CSV"),
    "fit-dis": (ESTIMATE_DEFAULTS, "one-step smoothed density on a grid"),
    "fit-dss": (DSS_DEFAULTS, "one-step smoothed score on a grid"),
    "stein": (STEIN_DEFAULTS, "Stein functionals over the default test class"),
    "band": (BAND_DEFAULTS, "multiplier-bootstrap simultaneous band (density or Stein)"),
    "peakiness": (PEAKINESS_DEFAULTS, "kernel peakiness and effective dimension across bandwidths"),
    "drift": (DRIFT_DEFAULTS, "kernel drift under a perturbed score field"),
    "experiment": (EXPERIMENT_DEFAULTS, "full replication experiment (curves, bands, peakiness, drift)"),
}


# ---------------------------------------------------------------------------
# configuration

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value", key=pair)
        key, value = pair.split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {p!r} is not a section", key=key)
        node[parts[-1]] = _parse_value(value)
    return cfg


def load_command_config(path) -> tuple[dict, dict]:
    """Config file contents and, when the file is a manifest, the manifest itself."""
    if path is None:
        return {}, {}
    data = load_json(path)
    if isinstance(data, dict) and "config" in data and "command" in data:
        return dict(data["config"]), data
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object", key="config")
    return data, {}


def effective_config(command: str, args) -> tuple[dict, dict]:
    defaults, _ = COMMANDS[command]
    user, manifest = load_command_config(args.config)
    user = apply_overrides(user, args.set)
    for flag, key in (("preset", "preset"), ("n", "n"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            if key not in defaults:
                raise ConfigError(f"--{flag} is not valid for {command}", key=key)
            user[key] = value
    sections = SECTION_KEYS if command == "experiment" else {}
    return merge_config(defaults, user, sections), manifest


# ---------------------------------------------------------------------------
# builders

def flow_spec(cfg) -> ForwardDiffusionSpec:
    return ForwardDiffusionSpec(cfg["beta0"], cfg["beta1"], cfg["time_power"])


def _geometry_law(cfg, arm_y, dgp=None, arm=None) -> GaussianMixtureLaw:
    geo = cfg["geometry"]
    if isinstance(geo, dict):
        return GaussianMixtureLaw.from_dict(geo)
    if geo == "standard-normal":
        return GaussianMixtureLaw.standard_normal(arm_y.shape[1] if arm_y is not None else dgp.eval_dim)
    if geo == "arm-gaussian":
        if arm_y is None or arm_y.shape[0] < 2:
            raise ConfigError("arm-gaussian geometry needs arm outcomes", key="geometry")
        d = arm_y.shape[1]
        return GaussianMixtureLaw.gaussian(arm_y.mean(axis=0), np.cov(arm_y.T).reshape(d, d))
    if geo == "counterfactual":
        if dgp is None:
            raise ConfigError("counterfactual geometry needs a preset", key="geometry")
        return dgp.counterfactual_law(arm)
    raise ConfigError(f"unknown geometry {geo!r}", key="geometry")


def build_score(cfg, arm_y, dgp=None, arm=None):
    spec = flow_spec(cfg)
    score = MixtureScore(_geometry_law(cfg, arm_y, dgp, arm), spec)
    pert = cfg.get("perturbation")
    if pert:
        unknown = set(pert) - {"eps", "mode", "time_scaling"}
        if unknown:
            raise ConfigError(f"unknown configuration key perturbation.{sorted(unknown)[0]!r}",
                              key=f"perturbation.{sorted(unknown)[0]}")
        score = PerturbedScore(score, float(pert.get("eps", 0.0)), pert.get("mode", "linear-tilt"),
                               time_scaling=pert.get("time_scaling", "none"), spec=spec)
    return score, spec


def build_kernel(cfg, arm_y, kind=None, h=None, dgp=None, arm=None):
    kind = kind or cfg["kernel"]
    h = float(cfg["h"] if h is None else h)
    dim = arm_y.shape[1] if arm_y is not None else dgp.eval_dim
    if kind == "iso":
        return IsotropicKernel(h, dim)
    if kind == "aniso":
        if cfg.get("cov") is None:
            raise ConfigError("aniso kernel needs cov", key="cov")
        return GaussianKernel(np.asarray(cfg["cov"], dtype=float), h)
    if kind == "aniso-axis":
        diag = np.ones(dim)
        diag[:int(cfg.get("d_star", 1))] = h**2
        return GaussianKernel(np.diag(diag), h)
    if kind == "transported":
        score, spec = build_score(cfg, arm_y, dgp, arm)
        return TransportedKernel(score, h, spec, int(cfg["flow_steps"]))
    if kind == "pca":
        return LocalPCAKernel(arm_y, h, int(cfg["k_nn"]), cfg["pca_ridge"], flow_spec(cfg),
                              cfg.get("anchor", "evaluation"))
    raise ConfigError(f"unknown kernel {kind!r}", key="kernel")


def build_region(cfg, y_eval) -> EvaluationRegion:
    proj = cfg.get("projection")
    if cfg.get("lower") is not None and cfg.get("upper") is not None:
        return EvaluationRegion(cfg["lower"], cfg["upper"], int(cfg["grid_points_per_axis"]), proj)
    if (cfg.get("lower") is None) != (cfg.get("upper") is None):
        raise ConfigError("lower and upper must be given together", key="lower" if cfg.get("lower") is None else "upper")
    return EvaluationRegion.bounding_box(y_eval, int(cfg["grid_points_per_axis"]), float(cfg.get("margin", 0.1)))


def _load_data(args, manifest, cfg):
    path = args.data or (manifest.get("inputs") or {}).get("data")
    if path is None:
        raise ConfigError("--data is required", key="data")
    batch = read_batch_csv(path, labels=cfg["labels"])
    return batch, path


def _prepare_estimation(cfg, args, manifest, with_grad):
    batch, path = _load_data(args, manifest, cfg)
    proj = None if cfg.get("projection") is None else np.atleast_2d(np.asarray(cfg["projection"], float))
    work = batch.projected(proj)
    arm = int(cfg["arm"])
    if cfg.get("geometry_data"):
        aux = read_batch_csv(cfg["geometry_data"], labels=cfg["labels"]).projected(proj)
        arm_y = aux.y[aux.a == arm]
    else:
        arm_y = work.y[work.a == arm]
    kernel = build_kernel(cfg, arm_y)
    region = build_region(cfg, work.y)
    grid = make_grid(region)
    plan = make_crossfit_plan(work.n, int(cfg["folds"]), as_seed_policy(int(cfg["seed"])))
    nuis = fit_localized_regressions(work, arm, plan, kernel, grid, cfg["ridge"], with_grad, None,
                                     float(cfg["clip"]), cfg["features"])
    return work, arm, kernel, grid, nuis, path


def _fields(cfg, dim):
    return default_test_class(dim, int(cfg["seed"]), int(cfg["n_random"]), cfg["field_center"],
                              float(cfg["field_scale"]))


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg, args, manifest):
    dgp = make_preset(cfg["preset"], cfg["confounding"], cfg["thin_scale"])
    batch = generate(dgp, int(cfg["n"]), int(cfg["seed"]))
    write_batch_csv(batch, args.out)
    return [args.out], {}


def cmd_fit_dis(cfg, args, manifest):
    work, arm, kernel, grid, nuis, path = _prepare_estimation(cfg, args, manifest, False)
    est = dis_estimate(work, arm, nuis, kernel, grid)
    est.to_csv(args.out)
    return [args.out], {"data": path}


def cmd_fit_dss(cfg, args, manifest):
    work, arm, kernel, grid, nuis, path = _prepare_estimation(cfg, args, manifest, True)
    est = dss_estimate(work, arm, nuis, kernel, grid, cfg["floor"])
    est.to_csv(args.out)
    return [args.out], {"data": path}


def _stein_estimates(cfg, work, arm, kernel, grid, nuis):
    fields = _fields(cfg, grid.dim)
    if cfg["baseline"] == "one-step":
        return stein_estimate(work, arm, nuis, kernel, grid, fields)
    if cfg["baseline"] == "treated-only":
        return treated_only_stein(work, arm, kernel, grid, fields)
    raise ConfigError(f"unknown baseline {cfg['baseline']!r}", key="baseline")


def cmd_stein(cfg, args, manifest):
    work, arm, kernel, grid, nuis, path = _prepare_estimation(cfg, args, manifest, True)
    write_stein_csv(_stein_estimates(cfg, work, arm, kernel, grid, nuis), args.out)
    return [args.out], {"data": path}


def cmd_band(cfg, args, manifest):
    target = cfg["target"]
    if target not in ("density", "stein"):
        raise ConfigError(f"unknown band target {target!r}", key="target")
    work, arm, kernel, grid, nuis, path = _prepare_estimation(cfg, args, manifest, target == "stein")
    seed = as_seed_policy(int(cfg["seed"])).child("multipliers")
    if target == "density":
        band = density_band(dis_estimate(work, arm, nuis, kernel, grid), float(cfg["alpha"]), int(cfg["B"]), seed,
                            args.workers)
    else:
        ests = _stein_estimates(cfg, work, arm, kernel, grid, nuis)
        band = stein_band(ests, float(cfg["alpha"]), int(cfg["B"]), seed, args.workers)
    env = cfg["envelope"]
    if env and np.any(np.asarray(env) != 0):
        band = inflate_band(band, env)
    band.to_csv(args.out)
    summary = str(Path(args.out).with_suffix("")) + "_summary.json"
    band.write_summary(summary)
    return [args.out, summary], {"data": path}


def _region_from_law(cfg, law):
    if cfg.get("lower") is not None and cfg.get("upper") is not None:
        return EvaluationRegion(cfg["lower"], cfg["upper"], int(cfg["grid_points_per_axis"]))
    mean, sd = law.mean(), np.sqrt(np.diag(law.covariance()))
    margin = float(cfg.get("margin", 0.1))
    lo, hi = mean - 3 * sd, mean + 3 * sd
    return EvaluationRegion(lo - margin * (hi - lo), hi + margin * (hi - lo), int(cfg["grid_points_per_axis"]))


def cmd_peakiness(cfg, args, manifest):
    dgp = make_preset(cfg["preset"])
    arm = int(cfg["arm"])
    law = dgp.counterfactual_law(arm)
    samples = law.sample(int(cfg["samples"]), as_seed_policy(int(cfg["seed"])).generator("peakiness-samples"))
    grid = make_grid(_region_from_law(cfg, law))
    out = Path(args.out)
    reports = {}
    for kind in cfg["kernels"]:
        reports[kind] = peakiness(lambda h, k=kind: build_kernel(cfg, samples, k, h, dgp, arm), cfg["h"], samples,
                                  grid, bool(cfg["include_score"]))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("kernel,h,H,Hs,d_eff\n")
        for kind, rep in reports.items():
            for i in range(rep.h.size):
                hs = "" if rep.Hs is None else repr(float(rep.Hs[i]))
                fh.write(f"{kind},{float(rep.h[i])!r},{float(rep.H[i])!r},{hs},{float(rep.d_eff[i])!r}\n")
    svg = str(out.with_suffix(".svg"))
    series = []
    for kind, rep in reports.items():
        inv = 1.0 / rep.h
        icept = float(np.mean(np.log10(rep.H) - rep.slope * np.log10(inv)))
        series.append(Series(kind, inv, rep.H, (rep.slope, icept)))
    line_plot_svg(series, svg, "kernel peakiness", "1/h", "H")
    return [str(out), svg], {}


def cmd_drift(cfg, args, manifest):
    dgp = make_preset(cfg["preset"])
    arm = int(cfg["arm"])
    law = dgp.counterfactual_law(arm)
    spec = flow_spec(cfg)
    base = MixtureScore(_geometry_law(cfg, None, dgp, arm), spec)
    if cfg.get("lower") is not None:
        region = EvaluationRegion(cfg["lower"], cfg["upper"], int(cfg["grid_points_per_axis"]))
    else:
        mean, sd = law.mean(), np.sqrt(np.diag(law.covariance()))
        region = EvaluationRegion(mean - 0.5 * sd, mean + 0.5 * sd, int(cfg["grid_points_per_axis"]))
    grid = make_grid(region)
    samples = law.sample(int(cfg["samples"]), as_seed_policy(int(cfg["seed"])).generator("drift-samples"))
    steps = int(cfg["flow_steps"])
    table = drift_diagnostic(
        lambda h: TransportedKernel(base, h, spec, steps),
        lambda h, e: TransportedKernel(PerturbedScore(base, e, cfg["mode"], time_scaling=cfg["time_scaling"],
                                                      spec=spec), h, spec, steps),
        samples, grid, cfg["h"], cfg["eps"])
    table.to_csv(args.out)
    svg = str(Path(args.out).with_suffix(".svg"))
    series = [Series(f"eps={e:g}", 1.0 / table.h, table.sup_drift[:, j]) for j, e in enumerate(table.eps)
              if e > 0]
    line_plot_svg(series, svg, f"kernel drift (eps slope {table.eps_slope:.2f}, h slope {table.h_slope:.2f})",
                  "1/h", "sup L2 drift")
    return [args.out, svg], {}


def cmd_experiment(cfg, args, manifest):
    result = run_experiment(cfg, args.out, workers=args.workers, command="experiment")
    return [str(Path(args.out) / f) for f in result.files], {}


HANDLERS = {
    "simulate": cmd_simulate, "fit-dis": cmd_fit_dis, "fit-dss": cmd_fit_dss, "stein": cmd_stein,
    "band": cmd_band, "peakiness": cmd_peakiness, "drift": cmd_drift, "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geosmooth", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress lines to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (defaults, helptext) in COMMANDS.items():
        keys = "\n".join(f"  {k} = {json.dumps(v)}" for k, v in defaults.items())
        p = sub.add_parser(name, help=helptext, description=helptext,
                           epilog=f"configuration keys (defaults):\n{keys}",
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON configuration file or a previous run's manifest")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
        p.add_argument("--seed", type=int, help="master seed (same as --set seed=...)")
        p.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("--out", required=True, help="output file (directory for experiment)")
        p.add_argument("--manifest", help="manifest path (default: next to --out)")
        if name == "simulate":
            p.add_argument("--preset", help="DGP preset name")
            p.add_argument("--n", type=int, help="number of units")
        if name in ("fit-dis", "fit-dss", "stein", "band"):
            p.add_argument("--data", help="observation CSV")
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, manifest = effective_config(args.command, args)
        if args.workers < 1:
            raise ConfigError("workers must be >= 1", key="workers")
        outputs, inputs = HANDLERS[args.command](cfg, args, manifest)
        if args.command == "experiment":
            return 0
        manifest_path = args.manifest or f"{args.out}.manifest.json"
        record = {"command": args.command, "config": cfg, "seed": cfg.get("seed"),
                  "inputs": {k: str(v) for k, v in inputs.items()}, "outputs": outputs, "versions": versions()}
        for key, path in inputs.items():
            record["inputs"][f"{key}_sha256"] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        dump_json(record, manifest_path)
        return 0
    except ConfigError as exc:
        key = f" (key: {exc.key})" if getattr(exc, "key", None) else ""
        print(f"geosmooth: configuration error{key}: {exc}", file=sys.stderr)
        return 2
    except (GeosmoothError, ValueError, ArithmeticError, OSError, np.linalg.LinAlgError) as exc:
        print(f"geosmooth: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
