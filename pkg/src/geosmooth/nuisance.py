"""Cross-fitted nuisance functions: propensity ``pi_a(x)``, the localized
regression ``mu(x; y) = E[kappa(y; Y) | X=x, A=a]`` and its gradient analogue
``nu(x; y) = E[grad_y kappa(y; Y) | X=x, A=a]`` on an evaluation grid."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import CrossFitPlan, Grid, ObservationBatch, as_seed_policy
from .errors import ConfigError, DegenerateFoldError, OracleUnavailableError, SingularityError
from .kernels import Kernel

JSON_SIZE_LIMIT = 10_000_000


# ---------------------------------------------------------------------------
# feature maps (the learner extension seam)

def affine_features(x: np.ndarray) -> np.ndarray:
    return np.atleast_2d(x)


def quadratic_features(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    iu = np.triu_indices(x.shape[1])
    return np.hstack([x, (x[:, :, None] * x[:, None, :])[:, iu[0], iu[1]]])


FEATURE_MAPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "affine": affine_features,
    "quadratic": quadratic_features,
}


def feature_map(name: str):
    try:
        return FEATURE_MAPS[name]
    except KeyError:
        raise ConfigError(f"unknown feature map {name!r}; known: {sorted(FEATURE_MAPS)}",
                          key="features") from None


# ---------------------------------------------------------------------------
# propensity

@dataclass
class PropensityModel:
    """Logistic model for ``P(A = arm | X)``; predictions clipped below at ``clip``."""

    coef: np.ndarray
    clip: float
    converged: bool
    iterations: int

    def raw(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return expit(self.coef[0] + x @ self.coef[1:])

    def predict(self, x) -> np.ndarray:
        return np.maximum(self.raw(x), self.clip)


def fit_logistic(x, target, max_iter: int = 100, tol: float = 1e-8):
    """Newton / IRLS for the logistic log-likelihood with an intercept.

    Returns ``(coef, converged, iterations)``. The stopping rule is the
    Euclidean norm of the mean score.
    """
    x = np.atleast_2d(x)
    n = x.shape[0]
    F = np.hstack([np.ones((n, 1)), x])
    coef = np.zeros(F.shape[1])
    target = np.asarray(target, dtype=float)
    for it in range(1, max_iter + 1):
        p = expit(F @ coef)
        grad = F.T @ (target - p) / n
        if np.linalg.norm(grad) < tol:
            return coef, True, it - 1
        w = np.maximum(p * (1 - p), 1e-12)
        hess = (F * w[:, None]).T @ F / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        coef = coef + step
    p = expit(F @ coef)
    converged = np.linalg.norm(F.T @ (target - p) / n) < tol
    return coef, bool(converged), max_iter


@dataclass
class PropensityFit:
    models: list
    pi_hat: np.ndarray
    clip_count: int
    clip: float


def fit_propensity(batch: ObservationBatch, arm: int, plan: CrossFitPlan, clip: float = 0.05,
                   max_iter: int = 100, tol: float = 1e-8) -> PropensityFit:
    """Per-fold logistic propensity with held-out predictions for every unit."""
    if not 0 <= clip < 0.5:
        raise ConfigError("clip must lie in [0, 0.5)", key="clip")
    if plan.n != batch.n:
        raise ConfigError(f"plan covers {plan.n} units, batch has {batch.n}", key="folds")
    target = (batch.a == arm).astype(float)
    pi_hat = np.empty(batch.n)
    models = []
    clipped = 0
    for fold in range(plan.folds):
        train, test = plan.train_index(fold), plan.test_index(fold)
        t = target[train]
        if t.min() == t.max():
            raise DegenerateFoldError(f"training set for fold {fold} contains a single arm")
        coef, ok, its = fit_logistic(batch.x[train], t, max_iter, tol)
        if not ok:
            warnings.warn(f"propensity IRLS did not converge in fold {fold} after {its} iterations",
                          RuntimeWarning, stacklevel=2)
        model = PropensityModel(coef, clip, ok, its)
        raw = model.raw(batch.x[test])
        clipped += int(np.sum(raw < clip))
        pi_hat[test] = np.maximum(raw, clip)
        models.append(model)
    return PropensityFit(models, pi_hat, clipped, clip)


# ---------------------------------------------------------------------------
# localized regressions

def ridge_fit(features, targets, ridge: float):
    """Ridge with an unpenalized intercept; multi-output. Returns (intercept, slopes)."""
    features = np.atleast_2d(features)
    mx = features.mean(axis=0)
    my = targets.mean(axis=0)
    fc = features - mx
    gram = fc.T @ fc + ridge * np.eye(fc.shape[1])
    rhs = fc.T @ (targets - my)
    if ridge == 0:
        if fc.shape[0] <= fc.shape[1] or np.linalg.cond(gram) > 1e12:
            raise SingularityError("singular normal equations at ridge=0; use ridge > 0")
    slopes = np.linalg.solve(gram, rhs)
    return my - mx @ slopes, slopes


@dataclass(eq=False)
class CrossFitNuisance:
    """Held-out nuisance predictions for every unit on a fixed grid.

    ``kernel`` and ``grid`` are kept by reference; estimators refuse a
    nuisance whose handles are not the very objects they were given.
    """

    arm: int
    plan: CrossFitPlan
    kernel: Kernel
    grid: Grid
    pi_hat: np.ndarray
    mu_hat: np.ndarray
    nu_hat: np.ndarray | None = None
    propensity_models: list = field(default_factory=list)
    mu_coef: list = field(default_factory=list)
    nu_coef: list = field(default_factory=list)
    clip_count: int = 0
    train_folds: list = field(default_factory=list)
    kappa: np.ndarray | None = field(default=None, repr=False)
    kappa_grad: np.ndarray | None = field(default=None, repr=False)
    mc_se: np.ndarray | None = None
    source: str = "fitted"
    feature_map: str = "affine"
    n: int = 0

    def check_separation(self) -> bool:
        """True when no unit was predicted by a model trained on its own fold."""
        if self.plan is None:
            return True
        for fold, trained_on in enumerate(self.train_folds):
            if fold in trained_on:
                return False
        return True

    def to_json_dict(self, limit: int = JSON_SIZE_LIMIT) -> dict:
        size = sum(c[1].size + c[0].size for c in self.mu_coef) + sum(
            c[1].size + c[0].size for c in self.nu_coef)
        if size > limit:
            raise ValueError(f"nuisance export has {size} scalars, above the limit {limit}")
        return {
            "arm": self.arm,
            "source": self.source,
            "feature_map": self.feature_map,
            "clip_count": self.clip_count,
            "propensity": [{"coef": m.coef.tolist(), "clip": m.clip, "converged": m.converged}
                           for m in self.propensity_models],
            "mu": [{"intercept": c[0].tolist(), "slopes": c[1].tolist()} for c in self.mu_coef],
            "nu": [{"intercept": c[0].tolist(), "slopes": c[1].tolist()} for c in self.nu_coef],
        }


def kernel_matrices(kernel: Kernel, grid: Grid, y, with_grad: bool):
    vals = kernel.evaluate(grid.points, y)
    grads = kernel.gradient(grid.points, y) if with_grad else None
    return vals, grads


def fit_localized_regressions(batch: ObservationBatch, arm: int, plan: CrossFitPlan, kernel: Kernel,
                              grid: Grid, ridge: float | None = None, with_grad: bool = False,
                              propensity: PropensityFit | None = None, clip: float = 0.05,
                              features: str = "affine") -> CrossFitNuisance:
    """Cross-fitted ridge regressions of ``kappa(y_g; Y)`` on covariate features.

    All grid points are fitted at once as a multi-output ridge problem, as
    are the gradient coordinates when ``with_grad``. The propensity is fitted
    on the same plan unless supplied.
    """
    if grid.size < 1:
        raise ConfigError("grid is empty", key="grid")
    if ridge is None:
        ridge = 1e-6 * batch.n
    if ridge < 0:
        raise ConfigError("ridge must be >= 0", key="ridge")
    fmap = feature_map(features)
    if propensity is None:
        propensity = fit_propensity(batch, arm, plan, clip)
    arm_idx = np.flatnonzero(batch.a == arm)
    vals, grads = kernel_matrices(kernel, grid, batch.y[arm_idx], with_grad)
    G, d = grid.size, grid.dim
    feats = fmap(batch.x)
    mu_hat = np.empty((batch.n, G))
    nu_hat = np.empty((batch.n, G, d)) if with_grad else None
    in_arm = np.zeros(batch.n, dtype=bool)
    in_arm[arm_idx] = True
    pos = np.full(batch.n, -1)
    pos[arm_idx] = np.arange(arm_idx.size)
    mu_coef, nu_coef, train_folds = [], [], []
    for fold in range(plan.folds):
        train = plan.train_index(fold)
        train = train[in_arm[train]]
        test = plan.test_index(fold)
        if train.size < 2:
            raise DegenerateFoldError(f"fold {fold}: fewer than two arm units for training")
        rows = pos[train]
        b0, b = ridge_fit(feats[train], vals[rows], ridge)
        mu_hat[test] = b0 + feats[test] @ b
        mu_coef.append((b0, b))
        if with_grad:
            tg = grads[rows].reshape(rows.size, G * d)
            c0, c = ridge_fit(feats[train], tg, ridge)
            nu_hat[test] = (c0 + feats[test] @ c).reshape(test.size, G, d)
            nu_coef.append((c0, c))
        train_folds.append(sorted(set(int(f) for f in np.unique(plan.assignment[train]))))
    kappa = np.zeros((batch.n, G))
    kappa[arm_idx] = vals
    kappa_grad = None
    if with_grad:
        kappa_grad = np.zeros((batch.n, G, d))
        kappa_grad[arm_idx] = grads
    return CrossFitNuisance(
        arm=arm, plan=plan, kernel=kernel, grid=grid, pi_hat=propensity.pi_hat, mu_hat=mu_hat,
        nu_hat=nu_hat, propensity_models=propensity.models, mu_coef=mu_coef, nu_coef=nu_coef,
        clip_count=propensity.clip_count, train_folds=train_folds, kappa=kappa, kappa_grad=kappa_grad,
        source="fitted", feature_map=features, n=batch.n,
    )


def oracle_nuisance(dgp, batch: ObservationBatch, arm: int, kernel: Kernel, grid: Grid,
                    with_grad: bool = False, method: str = "auto", mc_count: int = 2000,
                    seed=0) -> CrossFitNuisance:
    """Exact nuisances from a synthetic data-generating process.

    ``pi`` comes from the DGP. ``mu`` (and ``nu``) are conditional
    expectations of the kernel under ``Y | X, A=arm``; they are computed in
    closed form when the kernel admits Gaussian averages (``method="auto"``
    or ``"closed-form"``) and otherwise by ``mc_count`` conditional draws per
    unit, with Monte-Carlo standard errors stored in ``mc_se``.
    """
    if method not in ("auto", "closed-form", "monte-carlo"):
        raise ConfigError(f"unknown oracle method {method!r}", key="method")
    pi = dgp.propensity(batch.x, arm)
    G, d = grid.size, grid.dim
    mu = np.zeros((batch.n, G))
    nu = np.zeros((batch.n, G, d)) if with_grad else None
    se = None
    use_mc = method == "monte-carlo"
    if not use_mc:
        try:
            for w, means, cov in dgp.conditional_components(batch.x, arm):
                mu += w * kernel.gaussian_average(grid.points, means, cov)
                if with_grad:
                    nu += w * kernel.gaussian_average_grad(grid.points, means, cov)
        except OracleUnavailableError:
            if method == "closed-form":
                raise
            use_mc = True
    if use_mc:
        mu, nu, se = _monte_carlo_nuisance(dgp, batch, arm, kernel, grid, with_grad, mc_count, seed)
    arm_idx = np.flatnonzero(batch.a == arm)
    vals, grads = kernel_matrices(kernel, grid, batch.y[arm_idx], with_grad)
    kappa = np.zeros((batch.n, G))
    kappa[arm_idx] = vals
    kappa_grad = None
    if with_grad:
        kappa_grad = np.zeros((batch.n, G, d))
        kappa_grad[arm_idx] = grads
    return CrossFitNuisance(arm=arm, plan=None, kernel=kernel, grid=grid, pi_hat=pi, mu_hat=mu,
                            nu_hat=nu, kappa=kappa, kappa_grad=kappa_grad, mc_se=se,
                            source="oracle", n=batch.n)


def _monte_carlo_nuisance(dgp, batch, arm, kernel, grid, with_grad, mc_count, seed):
    policy = as_seed_policy(seed)
    G, d = grid.size, grid.dim
    mu = np.empty((batch.n, G))
    se = np.empty((batch.n, G))
    nu = np.empty((batch.n, G, d)) if with_grad else None
    for i in range(batch.n):
        rng = policy.generator("oracle-mc", i)
        draws = dgp.sample_outcome(np.repeat(batch.x[i:i + 1], mc_count, axis=0), arm, rng)
        vals = kernel.evaluate(grid.points, draws)
        mu[i] = vals.mean(axis=0)
        se[i] = vals.std(axis=0, ddof=1) / np.sqrt(mc_count)
        if with_grad:
            nu[i] = kernel.gradient(grid.points, draws).mean(axis=0)
    return mu, nu, se


def perturb_nuisance(nuisance: CrossFitNuisance, x, eps: float = 0.0, mu_offset: float = 0.0,
                     column: int = 0) -> CrossFitNuisance:
    """Jointly perturbed copy used in double-robustness studies.

    With ``t = tanh(x[:, column])``: ``1/pi -> (1/pi)(1 + eps t)`` and
    ``mu -> mu (1 + eps t) + mu_offset`` (``nu`` likewise without the
    offset). The one-step bias is then ``-eps^2 E[t^2 mu]``, quadratic in
    ``eps``, while weighting-only estimators see a first-order shift.
    """
    t = np.tanh(np.atleast_2d(x)[:, column])
    factor = 1.0 + eps * t
    if np.any(factor <= 0):
        raise ConfigError("perturbation makes weights nonpositive; use |eps| < 1", key="eps")
    out = CrossFitNuisance(**{f: getattr(nuisance, f) for f in nuisance.__dataclass_fields__})
    out.pi_hat = nuisance.pi_hat / factor
    out.mu_hat = nuisance.mu_hat * factor[:, None] + mu_offset
    if nuisance.nu_hat is not None:
        out.nu_hat = nuisance.nu_hat * factor[:, None, None]
    out.source = f"{nuisance.source}+perturbed"
    return out
