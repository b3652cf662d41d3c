"""Confounded synthetic data-generating processes with known counterfactual laws.

Covariates are ``X ~ N(0, I_k)``; treatment is ``A | X ~ Bernoulli(expit(c0 +
c * d'X))``; and for each arm the outcome is a Gaussian mixture whose
component means move affinely with ``x``:

    Y | X=x, A=a  ~  sum_j w_j N(m_j + B_j x, C_j).

Integrating out ``X`` the counterfactual law of ``Y^a`` is the mixture with
covariances ``C_j + B_j B_j'``, so every smoothed population target is
available in closed form for Gaussian-family kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..core import ObservationBatch, as_seed_policy
from ..errors import ConfigError
from ..scores import GaussianMixtureLaw


@dataclass(frozen=True)
class OutcomeComponent:
    weight: float
    mean: np.ndarray
    loading: np.ndarray
    cov: np.ndarray

    def to_dict(self):
        return {"weight": self.weight, "mean": self.mean.tolist(), "loading": self.loading.tolist(),
                "cov": self.cov.tolist()}


def _component(weight, mean, loading, cov, d, k):
    mean = np.asarray(mean, dtype=float).reshape(d)
    loading = np.asarray(loading, dtype=float).reshape(d, k)
    cov = np.asarray(cov, dtype=float).reshape(d, d)
    return OutcomeComponent(float(weight), mean, loading, cov)


@dataclass(frozen=True, eq=False)
class SyntheticDGP:
    name: str
    d: int
    k: int
    arms: dict
    confounding: float = 0.4
    intercept: float = 0.0
    direction: np.ndarray | None = None
    projection: np.ndarray | None = None
    d_star: int | None = None
    pi_min: float = 0.1
    thin_scale: float | None = None
    labels: tuple = (0, 1)

    def __post_init__(self):
        direction = np.eye(self.k)[0] if self.direction is None else np.asarray(self.direction, float)
        object.__setattr__(self, "direction", direction.reshape(self.k))
        arms = {}
        for arm, comps in self.arms.items():
            built = [c if isinstance(c, OutcomeComponent) else _component(**c, d=self.d, k=self.k)
                     for c in comps]
            if abs(sum(c.weight for c in built) - 1.0) > 1e-12:
                raise ConfigError(f"arm {arm} weights must sum to 1", key="weight")
            arms[int(arm)] = built
        object.__setattr__(self, "arms", arms)
        if self.projection is not None:
            P = np.atleast_2d(np.asarray(self.projection, dtype=float))
            if P.shape[1] != self.d:
                raise ConfigError("projection must have d columns", key="projection")
            object.__setattr__(self, "projection", P)
        if self.d_star is None:
            object.__setattr__(self, "d_star", self.d)

    @property
    def eval_dim(self) -> int:
        return self.d if self.projection is None else self.projection.shape[0]

    # treatment ------------------------------------------------------------
    def propensity(self, x, arm: int) -> np.ndarray:
        p1 = expit(self.intercept + self.confounding * np.atleast_2d(x) @ self.direction)
        return p1 if arm == self.labels[1] else 1.0 - p1

    # outcomes -------------------------------------------------------------
    def _project(self, y):
        return y if self.projection is None else y @ self.projection.T

    def conditional_components(self, x, arm: int, projected: bool = True):
        """``[(w_j, means (n, d'), cov (d', d'))]`` for ``Y | X=x, A=arm``."""
        x = np.atleast_2d(x)
        out = []
        for c in self.arms[arm]:
            means = c.mean + x @ c.loading.T
            cov = c.cov
            if projected and self.projection is not None:
                means = means @ self.projection.T
                cov = self.projection @ cov @ self.projection.T
            out.append((c.weight, means, cov))
        return out

    def sample_outcome(self, x, arm: int, rng, projected: bool = False) -> np.ndarray:
        x = np.atleast_2d(x)
        comps = self.arms[arm]
        w = np.array([c.weight for c in comps])
        pick = rng.choice(len(comps), size=x.shape[0], p=w) if len(comps) > 1 else np.zeros(x.shape[0], int)
        noise = rng.standard_normal((x.shape[0], self.d))
        y = np.empty((x.shape[0], self.d))
        for j, c in enumerate(comps):
            rows = pick == j
            y[rows] = c.mean + x[rows] @ c.loading.T + noise[rows] @ np.linalg.cholesky(c.cov).T
        return self._project(y) if projected else y

    def counterfactual_law(self, arm: int, projected: bool = True) -> GaussianMixtureLaw:
        comps = self.arms[arm]
        w = np.array([c.weight for c in comps])
        m = np.stack([c.mean for c in comps])
        cov = np.stack([c.cov + c.loading @ c.loading.T for c in comps])
        law = GaussianMixtureLaw(w, m, cov)
        if projected and self.projection is not None:
            law = law.project(self.projection)
        return law

    def to_dict(self) -> dict:
        return {
            "name": self.name, "d": self.d, "k": self.k, "d_star": self.d_star,
            "confounding": self.confounding, "intercept": self.intercept,
            "direction": self.direction.tolist(), "pi_min": self.pi_min,
            "thin_scale": self.thin_scale,
            "projection": None if self.projection is None else self.projection.tolist(),
            "arms": {str(a): [c.to_dict() for c in comps] for a, comps in self.arms.items()},
        }


def generate(dgp: SyntheticDGP, n: int, seed, stream: str = "data", index: tuple = ()) -> ObservationBatch:
    """Draw ``n`` i.i.d. units; ambient outcomes (apply ``dgp.projection`` to evaluate)."""
    if n < 1:
        raise ConfigError("n must be positive", key="n")
    rng = as_seed_policy(seed).generator(stream, n, *index)
    x = rng.standard_normal((n, dgp.k))
    p1 = dgp.propensity(x, dgp.labels[1])
    a = np.where(rng.random(n) < p1, dgp.labels[1], dgp.labels[0])
    y = np.empty((n, dgp.d))
    for arm in dgp.labels:
        rows = a == arm
        if rows.any():
            y[rows] = dgp.sample_outcome(x[rows], arm, rng)
    return ObservationBatch(x, a, y, labels=dgp.labels, ids=np.arange(n))


def positivity_audit(dgp: SyntheticDGP, draws: int = 100_000, seed=0) -> float:
    """Smallest propensity of either arm over ``draws`` covariate draws."""
    rng = as_seed_policy(seed).generator("positivity", draws)
    x = rng.standard_normal((draws, dgp.k))
    p1 = dgp.propensity(x, dgp.labels[1])
    return float(min(p1.min(), (1 - p1).min()))


# ---------------------------------------------------------------------------
# presets

def _thin_embedding(d, k, active_mean, active_loading, active_cov, tau):
    """Components living near a ``len(active_mean)``-dimensional coordinate subspace."""
    s = len(active_mean)
    mean = np.zeros(d)
    mean[:s] = active_mean
    loading = np.zeros((d, k))
    loading[:s] = active_loading
    cov = np.eye(d) * tau**2
    cov[:s, :s] = active_cov
    return {"weight": 1.0, "mean": mean, "loading": loading, "cov": cov}


def _preset_table():
    return {
        "gauss1d": dict(d=1, k=3, arms={
            1: [dict(weight=1.0, mean=[0.3], loading=[[0.6, 0.3, 0.0]], cov=[[0.5]])],
            0: [dict(weight=1.0, mean=[-0.3], loading=[[0.4, 0.0, 0.2]], cov=[[0.6]])]}),
        "mix1d": dict(d=1, k=3, arms={
            1: [dict(weight=0.4, mean=[-1.2], loading=[[0.5, 0.2, 0.0]], cov=[[0.25]]),
                dict(weight=0.6, mean=[1.0], loading=[[0.4, 0.0, 0.2]], cov=[[0.4]])],
            0: [dict(weight=0.5, mean=[-0.8], loading=[[0.3, 0.0, 0.0]], cov=[[0.4]]),
                dict(weight=0.5, mean=[0.8], loading=[[0.3, 0.1, 0.0]], cov=[[0.4]])]}),
        "gauss2d": dict(d=2, k=3, arms={
            1: [dict(weight=1.0, mean=[0.2, -0.1], loading=[[0.6, 0.2, 0.0], [0.3, 0.0, 0.3]],
                     cov=[[0.5, 0.1], [0.1, 0.4]])],
            0: [dict(weight=1.0, mean=[-0.2, 0.1], loading=[[0.4, 0.0, 0.2], [0.0, 0.3, 0.0]],
                     cov=[[0.6, 0.0], [0.0, 0.5]])]}),
        "mix2d": dict(d=2, k=3, arms={
            1: [dict(weight=0.45, mean=[-1.0, 0.3], loading=[[0.5, 0.2, 0.0], [0.2, 0.0, 0.1]],
                     cov=[[0.35, 0.1], [0.1, 0.25]]),
                dict(weight=0.55, mean=[0.9, -0.2], loading=[[0.4, 0.0, 0.2], [0.0, 0.3, 0.0]],
                     cov=[[0.3, -0.08], [-0.08, 0.4]])],
            0: [dict(weight=1.0, mean=[0.0, 0.0], loading=[[0.3, 0.0, 0.0], [0.0, 0.3, 0.0]],
                     cov=[[0.8, 0.0], [0.0, 0.8]])]}),
        "diffuse2d": dict(d=2, k=3, arms={
            1: [dict(weight=1.0, mean=[0.0, 0.0], loading=[[0.3, 0.0, 0.0], [0.0, 0.3, 0.0]],
                     cov=[[0.91, 0.0], [0.0, 0.91]])],
            0: [dict(weight=1.0, mean=[0.0, 0.0], loading=[[0.3, 0.0, 0.0], [0.0, 0.3, 0.0]],
                     cov=[[0.91, 0.0], [0.0, 0.91]])]}),
    }


def make_preset(name: str, confounding: float | None = None, thin_scale: float | None = None) -> SyntheticDGP:
    """Shipped DGPs.

    ``gauss1d``, ``mix1d``, ``gauss2d``, ``mix2d``, ``diffuse2d`` are full
    dimensional. ``aniso2d`` has one active axis and one thin axis of scale
    ``thin_scale``. ``lowdim5``/``lowdim10`` vary along two active axes with
    thin noise elsewhere and are evaluated through a projection onto one
    active and one thin axis.
    """
    conf = 0.4 if confounding is None else float(confounding)
    table = _preset_table()
    if name in table:
        spec = table[name]
        return SyntheticDGP(name, spec["d"], spec["k"], spec["arms"], confounding=conf)
    tau = 0.03 if thin_scale is None else float(thin_scale)
    if name == "aniso2d":
        k = 3
        arms = {
            1: [_thin_embedding(2, k, [0.2], [[0.8, 0.3, 0.0]], [[0.8]], tau)],
            0: [_thin_embedding(2, k, [-0.2], [[0.5, 0.0, 0.3]], [[0.9]], tau)],
        }
        return SyntheticDGP(name, 2, k, arms, confounding=conf, d_star=1, thin_scale=tau)
    if name in ("lowdim5", "lowdim10"):
        d = 5 if name == "lowdim5" else 10
        k = 4
        arms = {
            1: [_thin_embedding(d, k, [0.2, -0.1], [[0.8, 0.3, 0.0, 0.0], [0.2, 0.0, 0.4, 0.0]],
                                [[0.8, 0.2], [0.2, 0.6]], tau)],
            0: [_thin_embedding(d, k, [-0.2, 0.1], [[0.5, 0.0, 0.0, 0.3], [0.0, 0.3, 0.0, 0.0]],
                                [[0.9, 0.0], [0.0, 0.7]], tau)],
        }
        projection = np.zeros((2, d))
        projection[0, 0] = 1.0
        projection[1, 2] = 1.0
        return SyntheticDGP(name, d, k, arms, confounding=conf, projection=projection, d_star=2,
                            thin_scale=tau)
    raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}", key="preset")


PRESETS = ("gauss1d", "mix1d", "gauss2d", "mix2d", "diffuse2d", "aniso2d", "lowdim5", "lowdim10")
