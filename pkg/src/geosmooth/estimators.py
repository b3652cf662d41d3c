"""One-step (influence-function corrected) and plug-in estimators of smoothed
counterfactual densities, smoothed scores and Stein functionals."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Grid, ObservationBatch, SeedPolicy, as_seed_policy
from .errors import ConfigError, ContaminationError, EmptyArmError, WiringError
from .kernels import Kernel
from .nuisance import CrossFitNuisance, PropensityFit, PropensityModel


@dataclass(eq=False)
class GridEstimate:
    """Estimates on a grid with per-unit influence values.

    For density estimates ``values`` is (G,) and ``influence`` is (n, G); for
    score estimates ``values`` is (G, d), ``influence`` is (n, G, d),
    ``sigma2`` holds the trace of the per-point covariance and
    ``sigma2_coord`` the coordinatewise variances.
    """

    grid: Grid
    values: np.ndarray
    sigma2: np.ndarray
    influence: np.ndarray = field(repr=False)
    kernel: Kernel | None = None
    method: str = ""
    n: int = 0
    sigma2_coord: np.ndarray | None = None
    flags: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        """Standard error of the grid values, ``sqrt(sigma2 / n)``."""
        s2 = self.sigma2 if self.sigma2_coord is None else self.sigma2_coord
        return np.sqrt(s2 / self.n)

    def centered_influence(self) -> np.ndarray:
        return self.influence - self.influence.mean(axis=0)

    def point_flags(self) -> list[str]:
        out = []
        for g in range(self.grid.size):
            tags = [name for name, mask in self.flags.items() if mask[g]]
            out.append("|".join(tags))
        return out

    def to_csv(self, path) -> None:
        d = self.grid.dim
        vals = self.values.reshape(self.grid.size, -1)
        ycols = [f"y{j}" for j in range(d)]
        vcols = ["value"] if vals.shape[1] == 1 else [f"value{j}" for j in range(vals.shape[1])]
        flags = self.point_flags()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(ycols + vcols + ["sigma2", "flags"]) + "\n")
            for g in range(self.grid.size):
                cells = [repr(float(v)) for v in self.grid.points[g]]
                cells += [repr(float(v)) for v in vals[g]]
                cells += [repr(float(self.sigma2[g])), flags[g]]
                fh.write(",".join(cells) + "\n")


@dataclass(eq=False)
class SteinEstimate:
    g_id: str
    value: float
    sigma2: float
    influence: np.ndarray = field(repr=False)
    n: int = 0
    method: str = ""

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2))


def write_stein_csv(estimates: Sequence[SteinEstimate], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("g_id,value,sigma2\n")
        for e in estimates:
            fh.write(f"{e.g_id},{float(e.value)!r},{float(e.sigma2)!r}\n")


# ---------------------------------------------------------------------------
# test fields

@dataclass(frozen=True)
class TestField:
    """Vector field ``g(y) = c * exp(-|y - center|^2 / (2 scale^2))``.

    ``direction`` is the constant vector ``c``; the divergence is
    ``-(c . (y - center)) / scale^2`` times the same envelope.
    """

    __test__ = False

    name: str
    direction: np.ndarray
    center: np.ndarray
    scale: float = 1.0

    def _envelope(self, y):
        r = np.atleast_2d(y) - self.center
        return r, np.exp(-0.5 * (r * r).sum(axis=1) / self.scale**2)

    def value(self, y) -> np.ndarray:
        _, env = self._envelope(y)
        return env[:, None] * self.direction[None]

    def divergence(self, y) -> np.ndarray:
        r, env = self._envelope(y)
        return -(r @ self.direction) / self.scale**2 * env


@dataclass(frozen=True)
class ZeroField:
    name: str = "zero"

    def value(self, y):
        return np.zeros_like(np.atleast_2d(y))

    def divergence(self, y):
        return np.zeros(np.atleast_2d(y).shape[0])


def default_test_class(dim: int, seed=0, n_random: int = 4, center=None, scale: float = 1.0) -> list:
    """Coordinate fields ``e_j exp(-|y|^2/2)`` plus seeded random directions."""
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    fields = [TestField(f"e{j}", np.eye(dim)[j], center, scale) for j in range(dim)]
    rng = as_seed_policy(seed).generator("test-fields", dim)
    for j in range(n_random):
        c = rng.standard_normal(dim)
        fields.append(TestField(f"r{j}", c / np.linalg.norm(c), center, scale))
    return fields


# ---------------------------------------------------------------------------
# helpers

def _check_wiring(batch: ObservationBatch, arm: int, nuisance: CrossFitNuisance, kernel, grid):
    if nuisance.kernel is not kernel:
        raise WiringError("nuisance was built for a different kernel")
    if nuisance.grid is not grid:
        raise WiringError("nuisance was built for a different grid")
    if nuisance.arm != arm:
        raise WiringError(f"nuisance was built for arm {nuisance.arm}, not {arm}")
    if nuisance.n != batch.n:
        raise WiringError(f"nuisance covers {nuisance.n} units, batch has {batch.n}")


def _indicator_weights(batch, arm, pi_hat):
    ind = (batch.a == arm).astype(float)
    return ind / pi_hat


def density_influence(batch, arm, nuisance) -> np.ndarray:
    """Uncentered influence values ``1{A=a}/pi (kappa - mu) + mu`` (n, G)."""
    w = _indicator_weights(batch, arm, nuisance.pi_hat)
    return w[:, None] * (nuisance.kappa - nuisance.mu_hat) + nuisance.mu_hat


def gradient_influence(batch, arm, nuisance) -> np.ndarray:
    """Uncentered influence values for the gradient component (n, G, d)."""
    if nuisance.nu_hat is None or nuisance.kappa_grad is None:
        raise ConfigError("nuisance lacks gradient regressions; fit with with_grad=True", key="with_grad")
    w = _indicator_weights(batch, arm, nuisance.pi_hat)
    return w[:, None, None] * (nuisance.kappa_grad - nuisance.nu_hat) + nuisance.nu_hat


# ---------------------------------------------------------------------------
# density

def dis_estimate(batch: ObservationBatch, arm: int, nuisance: CrossFitNuisance, kernel: Kernel,
                 grid: Grid) -> GridEstimate:
    """Cross-fitted one-step estimate of the smoothed counterfactual density."""
    _check_wiring(batch, arm, nuisance, kernel, grid)
    phi = density_influence(batch, arm, nuisance)
    values = phi.mean(axis=0)
    sigma2 = phi.var(axis=0)
    return GridEstimate(grid, values, sigma2, phi, kernel, "dis", batch.n,
                        flags={"negative": values < 0},
                        diagnostics={"clip_count": nuisance.clip_count, "nuisance": nuisance.source})


def _propensity_values(propensity, x):
    if propensity is None:
        return None
    if isinstance(propensity, PropensityFit):
        return propensity.pi_hat
    if isinstance(propensity, PropensityModel):
        return propensity.predict(x)
    if callable(propensity):
        return np.asarray(propensity(x), dtype=float)
    return np.asarray(propensity, dtype=float)


def plugin_estimate(batch: ObservationBatch, arm: int, propensity, kernel: Kernel, grid: Grid,
                    mode: str = "ipw-free", kappa=None) -> GridEstimate:
    """Kernel average over arm units, optionally with stabilized 1/pi weights.

    ``propensity`` may be an array of per-unit values, a fitted model or a
    callable of ``x``. The reported variance is that of the linearized
    ratio estimator.
    """
    if mode not in ("ipw-free", "ipw"):
        raise ConfigError(f"unknown plug-in mode {mode!r}", key="mode")
    mask = batch.a == arm
    if not mask.any():
        raise EmptyArmError(f"no units with A={arm}")
    if mode == "ipw":
        pi = _propensity_values(propensity, batch.x)
        if pi is None:
            raise ConfigError("ipw mode requires a propensity", key="propensity")
        w = mask / pi
    else:
        w = mask.astype(float)
    if kappa is None:
        kappa = np.zeros((batch.n, grid.size))
        kappa[mask] = kernel.evaluate(grid.points, batch.y[mask])
    wbar = w.mean()
    values = (w @ kappa) / w.sum()
    phi = values + w[:, None] / wbar * (kappa - values)
    return GridEstimate(grid, values, phi.var(axis=0), phi, kernel, f"plugin-{mode}", batch.n,
                        flags={"negative": values < 0})


def _row_digests(batch: ObservationBatch) -> set:
    rows = np.hstack([batch.x, batch.a[:, None].astype(float), batch.y])
    return {hashlib.blake2b(r.tobytes(), digest_size=12).digest() for r in np.ascontiguousarray(rows)}


def check_disjoint(reference: ObservationBatch, working: ObservationBatch) -> None:
    if reference.ids is not None and working.ids is not None:
        overlap = np.intersect1d(reference.ids, working.ids)
    else:
        overlap = _row_digests(reference) & _row_digests(working)
    if len(overlap):
        raise ContaminationError(f"reference pool shares {len(overlap)} units with the working sample")


def reference_proxy(batch_ref: ObservationBatch, arm: int, propensity, kernel: Kernel, grid: Grid,
                    working: ObservationBatch | None = None) -> GridEstimate:
    """Stabilized inverse-propensity weighted kernel mixture over a reference pool."""
    if working is not None:
        check_disjoint(batch_ref, working)
    mode = "ipw-free" if propensity is None else "ipw"
    est = plugin_estimate(batch_ref, arm, propensity, kernel, grid, mode)
    est.method = "reference-proxy"
    return est


# ---------------------------------------------------------------------------
# score

def dss_estimate(batch: ObservationBatch, arm: int, nuisance: CrossFitNuisance, kernel: Kernel,
                 grid: Grid, floor: float | None = None) -> GridEstimate:
    """Ratio ``G_hat / max(P_hat, floor)`` of one-step gradient and density components."""
    _check_wiring(batch, arm, nuisance, kernel, grid)
    phi_p = density_influence(batch, arm, nuisance)
    phi_g = gradient_influence(batch, arm, nuisance)
    P = phi_p.mean(axis=0)
    Gv = phi_g.mean(axis=0)
    if floor is None:
        floor = 1e-4 * max(float(P.max()), 0.0)
        if floor <= 0:
            floor = 1e-300
    elif floor <= 0:
        raise ConfigError("denominator floor must be positive", key="floor")
    truncated = P < floor
    Pt = np.where(truncated, floor, P)
    s = Gv / Pt[:, None]
    phi_s = (phi_g - s[None] * phi_p[..., None]) / Pt[None, :, None]
    var_coord = phi_s.var(axis=0)
    est = GridEstimate(grid, s, var_coord.sum(axis=1), phi_s, kernel, "dss", batch.n,
                       sigma2_coord=var_coord, flags={"truncated": truncated},
                       diagnostics={"truncation_count": int(truncated.sum()), "floor": floor,
                                    "P_hat": P, "G_hat": Gv, "clip_count": nuisance.clip_count})
    est.diagnostics["phi_P"] = phi_p
    est.diagnostics["phi_G"] = phi_g
    return est


# ---------------------------------------------------------------------------
# Stein functionals

def _stein_weights(field_, grid):
    return grid.weights * field_.divergence(grid.points), grid.weights[:, None] * field_.value(grid.points)


def stein_from_components(phi_p, phi_g, grid: Grid, fields, method: str) -> list[SteinEstimate]:
    """Quadrature ``sum_q w_q [div g P + g . G]`` applied unit by unit."""
    n = phi_p.shape[0]
    out = []
    for f in fields:
        wd, wg = _stein_weights(f, grid)
        psi = phi_p @ wd + np.einsum("ngd,gd->n", phi_g, wg)
        value = float(psi.mean())
        centered = psi - value
        out.append(SteinEstimate(f.name, value, float(centered.var() / n), centered, n, method))
    return out


def stein_estimate(batch: ObservationBatch, arm: int, nuisance: CrossFitNuisance, kernel: Kernel,
                   grid: Grid, fields) -> list[SteinEstimate]:
    """One-step Stein functionals for each test field (list in, list out)."""
    _check_wiring(batch, arm, nuisance, kernel, grid)
    single = not isinstance(fields, (list, tuple))
    fields = [fields] if single else list(fields)
    phi_p = density_influence(batch, arm, nuisance)
    phi_g = gradient_influence(batch, arm, nuisance)
    return stein_from_components(phi_p, phi_g, grid, fields, "stein-one-step")


def treated_only_stein(batch: ObservationBatch, arm: int, kernel: Kernel, grid: Grid,
                       fields) -> list[SteinEstimate]:
    """Unweighted arm-only Stein functionals (no propensity, no correction)."""
    mask = batch.a == arm
    if not mask.any():
        raise EmptyArmError(f"no units with A={arm}")
    single = not isinstance(fields, (list, tuple))
    fields = [fields] if single else list(fields)
    y = batch.y[mask]
    phi_p = kernel.evaluate(grid.points, y)
    phi_g = kernel.gradient(grid.points, y)
    return stein_from_components(phi_p, phi_g, grid, fields, "stein-treated-only")


def stein_population(P, Gv, grid: Grid, fields) -> np.ndarray:
    """Quadrature of the Stein integrand for given density/gradient fields."""
    return np.array([float(grid.weights @ (f.divergence(grid.points) * P)
                           + (grid.weights[:, None] * f.value(grid.points) * Gv).sum())
                     for f in fields])
