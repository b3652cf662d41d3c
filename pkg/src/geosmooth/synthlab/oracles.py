"""Population targets, error metrics, rate fitting and the geometry-drift diagnostic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..core import Grid, as_seed_policy
from ..errors import (ConfigError, GridMismatchError, InsufficientScalesError, LogDomainError,
                      OracleUnavailableError, WiringError)
from ..estimators import GridEstimate
from ..kernels import Kernel
from .dgp import SyntheticDGP


def _quadrature_average(kernel: Kernel, points, law, grad: bool, tol: float = 1e-5, max_per_axis: int = 1024):
    """``int kappa(y; u) p(u) du`` by midpoint quadrature over ``u``, refined until stable."""
    d = law.dim
    if d > 2:
        raise OracleUnavailableError("quadrature oracle is limited to d <= 2")
    sd = np.sqrt(np.diag(law.covariance()))
    lo = (law.means - 8 * np.sqrt(np.diagonal(law.covariances, axis1=1, axis2=2))).min(axis=0)
    hi = (law.means + 8 * np.sqrt(np.diagonal(law.covariances, axis1=1, axis2=2))).max(axis=0)
    lo, hi = np.minimum(lo, points.min(axis=0) - 4 * sd), np.maximum(hi, points.max(axis=0) + 4 * sd)
    prev = None
    m = 64 if d == 1 else 32
    while True:
        axes = [l + (h - l) / m * (np.arange(m) + 0.5) for l, h in zip(lo, hi)]
        u = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        w = np.exp(law.logpdf(u)) * np.prod((hi - lo) / m)
        keep = w > 1e-14 * w.max()
        u, w = u[keep], w[keep]
        if grad:
            cur = np.einsum("n,ngd->gd", w, kernel.gradient(points, u))
        else:
            cur = w @ kernel.evaluate(points, u)
        if prev is not None and np.max(np.abs(cur - prev)) <= tol:
            return cur
        if 2 * m > max_per_axis:
            raise OracleUnavailableError("quadrature oracle did not reach the requested tolerance")
        prev, m = cur, 2 * m


def population_density(dgp: SyntheticDGP, arm: int, kernel: Kernel, grid: Grid, method: str = "auto"):
    """``p_{a,h}(y) = E kappa(y; Y^a)`` on the grid (evaluation coordinates)."""
    law = dgp.counterfactual_law(arm)
    if method in ("auto", "closed-form"):
        try:
            return kernel.mixture_average(grid.points, law)
        except OracleUnavailableError:
            if method == "closed-form":
                raise
    return _quadrature_average(kernel, grid.points, law, grad=False)


def population_gradient(dgp: SyntheticDGP, arm: int, kernel: Kernel, grid: Grid, method: str = "auto"):
    law = dgp.counterfactual_law(arm)
    if method in ("auto", "closed-form"):
        try:
            return kernel.mixture_average_grad(grid.points, law)
        except OracleUnavailableError:
            if method == "closed-form":
                raise
    return _quadrature_average(kernel, grid.points, law, grad=True)


def population_score(dgp: SyntheticDGP, arm: int, kernel: Kernel, grid: Grid, method: str = "auto"):
    """``s_{a,h} = grad p_{a,h} / p_{a,h}`` on the grid."""
    p = population_density(dgp, arm, kernel, grid, method)
    g = population_gradient(dgp, arm, kernel, grid, method)
    return g / p[:, None]


# ---------------------------------------------------------------------------
# metrics

def _same_grid(a: Grid, b: Grid) -> bool:
    return a is b or (a.points.shape == b.points.shape and np.array_equal(a.points, b.points)
                      and np.array_equal(a.weights, b.weights))


def ise(estimate, target, grid: Grid, allow_cross_kernel: bool = False) -> float:
    """Quadrature ``sum_g w_g (estimate_g - target_g)^2``.

    ``target`` may be an array or a ``GridEstimate``; in the latter case the
    two must share the smoothing kernel unless ``allow_cross_kernel``.
    """
    values = estimate.values if isinstance(estimate, GridEstimate) else np.asarray(estimate, float)
    if isinstance(estimate, GridEstimate) and not _same_grid(estimate.grid, grid):
        raise GridMismatchError("estimate and metric grids differ")
    if isinstance(target, GridEstimate):
        if not _same_grid(target.grid, grid):
            raise GridMismatchError("target and metric grids differ")
        if (not allow_cross_kernel and isinstance(estimate, GridEstimate)
                and target.kernel is not estimate.kernel):
            raise WiringError("estimate and target use different smoothing kernels")
        target = target.values
    target = np.asarray(target, dtype=float)
    if values.shape[0] != grid.size or target.shape[0] != grid.size:
        raise GridMismatchError("values do not match the grid size")
    diff = (values - target).reshape(grid.size, -1)
    return float(grid.weights @ (diff**2).sum(axis=1))


def interior_mse(values, target, grid: Grid, fraction: float = 0.6) -> float:
    """Mean over interior grid points of the squared Euclidean error."""
    mask = grid.interior_mask(fraction)
    diff = (np.asarray(values) - np.asarray(target)).reshape(grid.size, -1)[mask]
    return float((diff**2).sum(axis=1).mean())


@dataclass
class RateCurve:
    n: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    slope_se: float
    error_se: np.ndarray | None = None
    label: str = ""


def rate_slope(n, errors, error_se=None, label: str = "") -> RateCurve:
    """Least-squares slope of ``log error`` on ``log n``."""
    n = np.asarray(n, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if n.size < 3:
        raise InsufficientScalesError("rate fits need at least three sample sizes")
    if np.any(np.diff(n) <= 0):
        raise ConfigError("n values must be strictly increasing", key="n")
    if np.any(errors <= 0):
        raise LogDomainError("errors must be positive to take logs")
    x, y = np.log(n), np.log(errors)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(n.size - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return RateCurve(n, errors, float(coef[1]), float(coef[0]), float(np.sqrt(cov[1, 1])),
                     None if error_se is None else np.asarray(error_se, float), label)


def loglog_fit(x, y) -> float:
    x = np.log(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise LogDomainError("values must be positive to take logs")
    if np.unique(x).size < 2:
        raise InsufficientScalesError("need at least two distinct abscissae")
    return float(np.polyfit(x, np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# drift

@dataclass
class DriftTable:
    h: np.ndarray
    eps: np.ndarray
    sup_drift: np.ndarray        # (len(h), len(eps)) sup over y of the L2(P_a) distance
    mean_drift: np.ndarray       # root of the grid average of the squared L2(P_a) distance
    bias_sup: np.ndarray         # sup over y of |E kappa_hat - E kappa|
    eps_slope: float = float("nan")
    h_slope: float = float("nan")
    eps_slopes: np.ndarray = field(default_factory=lambda: np.empty(0))
    h_slopes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def rows(self):
        for i, h in enumerate(self.h):
            for j, e in enumerate(self.eps):
                yield h, e, self.sup_drift[i, j], self.mean_drift[i, j], self.bias_sup[i, j]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("h,eps,drift_sup,drift_mean,bias_sup\n")
            for row in self.rows():
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def drift_diagnostic(kernel_true: Callable[[float], Kernel], kernel_perturbed: Callable[[float, float], Kernel],
                     law_samples, grid: Grid, h_list: Sequence[float], eps_list: Sequence[float]) -> DriftTable:
    """Monte-Carlo ``L2(P_a)`` distance between reference and perturbed kernels.

    For each ``(h, eps)`` and grid point ``y`` computes
    ``sqrt(mean_i (kappa_hat(y; U_i) - kappa(y; U_i))^2)`` over the law samples
    ``U_i`` (common to all cells), then reports its sup over the grid and its
    grid root-mean-square. Exponents: slope of log drift in ``log eps`` (at
    each ``h``, for ``eps > 0``) and in ``log(1/h)`` (at each ``eps > 0``).
    """
    h_list = np.asarray(h_list, dtype=float)
    eps_list = np.asarray(eps_list, dtype=float)
    u = np.atleast_2d(law_samples)
    sup = np.zeros((h_list.size, eps_list.size))
    mean = np.zeros_like(sup)
    bias = np.zeros_like(sup)
    for i, h in enumerate(h_list):
        base = kernel_true(float(h)).evaluate(grid.points, u)
        for j, e in enumerate(eps_list):
            diff = kernel_perturbed(float(h), float(e)).evaluate(grid.points, u) - base
            l2 = np.sqrt((diff**2).mean(axis=0))
            sup[i, j] = l2.max()
            mean[i, j] = np.sqrt((l2**2).mean())
            bias[i, j] = np.abs(diff.mean(axis=0)).max()
    table = DriftTable(h_list, eps_list, sup, mean, bias)
    pos = eps_list > 0
    if pos.sum() >= 2:
        table.eps_slopes = np.array([loglog_fit(eps_list[pos], sup[i, pos]) for i in range(h_list.size)])
        table.eps_slope = float(table.eps_slopes.mean())
    if h_list.size >= 2 and pos.any():
        table.h_slopes = np.array([loglog_fit(1.0 / h_list, sup[:, j]) for j in np.flatnonzero(pos)])
        table.h_slope = float(table.h_slopes.mean())
    return table
