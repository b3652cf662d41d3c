"""Score fields ``(z, t) -> grad_z log p_t(z)`` used to warp smoothing kernels.

Three kinds are provided:

* ``MixtureScore``: the exact score of a Gaussian mixture pushed through the
  variance-preserving forward diffusion (oracle geometry).
* ``PerturbedScore``: a base field plus a controlled smooth perturbation whose
  size is proportional to ``eps``.
* ``CallableScore``: any user callable, with a finite-difference divergence.

The neighbourhood-PCA geometry proxy lives here too (``fit_pca_proxy``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .core import ObservationBatch
from .errors import ConfigError, NotEnoughNeighborsError
from .flow import ForwardDiffusionSpec

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GaussianMixtureLaw:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m[:, None] if w.size > 1 else m[None, :]
        c = np.asarray(self.covariances, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if not (w.size == m.shape[0] == c.shape[0]) or c.shape[1:] != (m.shape[1], m.shape[1]):
            raise ConfigError("inconsistent mixture component shapes", key="covariances")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must be >= 0 and sum to 1 (sum={w.sum()!r})", key="weights")
        if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-12):
            raise ConfigError("component covariances must be symmetric", key="covariances")
        if np.min(np.linalg.eigvalsh(c)) <= 0:
            raise ConfigError("component covariances must be positive definite", key="covariances")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", c)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixtureLaw":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls(np.ones(1), mean[None, :], cov[None])

    @classmethod
    def standard_normal(cls, d: int) -> "GaussianMixtureLaw":
        return cls.gaussian(np.zeros(d), np.eye(d))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("j,jab->ab", self.weights, self.covariances) + np.einsum(
            "j,ja,jb->ab", self.weights, dev, dev
        )

    def project(self, projection) -> "GaussianMixtureLaw":
        P = np.atleast_2d(np.asarray(projection, dtype=float))
        return GaussianMixtureLaw(
            self.weights, self.means @ P.T, np.einsum("ia,jab,kb->jik", P, self.covariances, P)
        )

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=count, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        noise = rng.standard_normal((count, self.dim))
        return self.means[comp] + np.einsum("nab,nb->na", chol[comp], noise)

    def logpdf(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return logsumexp(_component_logpdf(self, z), axis=1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixtureLaw":
        try:
            return cls(data["weights"], data["means"], data["covariances"])
        except KeyError as exc:
            raise ConfigError(f"mixture JSON lacks key {exc.args[0]!r}", key=exc.args[0]) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixtureLaw":
        return cls.from_dict(json.loads(text))


def _component_logpdf(law: GaussianMixtureLaw, z: np.ndarray) -> np.ndarray:
    """(N, K) array of ``log w_j + log N(z; m_j, C_j)``."""
    chol = np.linalg.cholesky(law.covariances)
    logdet = 2 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    diff = z[:, None, :] - law.means[None]
    sol = np.linalg.solve(chol[None], diff[..., None])[..., 0]
    maha = np.einsum("nja,nja->nj", sol, sol)
    d = law.dim
    return np.log(law.weights)[None] - 0.5 * (maha + logdet[None] + d * LOG_2PI)


def diffused_mixture(
    law: GaussianMixtureLaw, t: float, schedule: ForwardDiffusionSpec | None = None
) -> GaussianMixtureLaw:
    """Exact time-``t`` marginal of the VP diffusion started at ``law``."""
    if not 0 <= t <= 1:
        raise ConfigError(f"diffusion time must lie in [0, 1], got {t}", key="t")
    schedule = schedule or ForwardDiffusionSpec()
    if t == 0:
        return law
    alpha = float(schedule.alpha(t))
    noise = float(schedule.noise_var(t))
    eye = np.eye(law.dim)
    return GaussianMixtureLaw(
        law.weights, alpha * law.means, alpha**2 * law.covariances + noise * eye[None]
    )


class _MixtureTerms:
    """Precomputed precisions for fast score and divergence evaluation."""

    def __init__(self, law: GaussianMixtureLaw):
        self.log_w = np.log(law.weights)
        self.means = law.means
        self.prec = np.linalg.inv(law.covariances)
        self.prec = 0.5 * (self.prec + np.swapaxes(self.prec, 1, 2))
        sign, logdet = np.linalg.slogdet(law.covariances)
        self.logdet = logdet
        self.trace_prec = np.trace(self.prec, axis1=1, axis2=2)
        self.d = law.dim

    def evaluate(self, z: np.ndarray, with_divergence: bool = False):
        diff = z[:, None, :] - self.means[None]  # (N, K, d)
        grads = -np.einsum("kab,nkb->nka", self.prec, diff)
        maha = -np.einsum("nka,nka->nk", diff, grads)
        logp = self.log_w[None] - 0.5 * (maha + self.logdet[None] + self.d * LOG_2PI)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        score = np.einsum("nk,nka->na", resp, grads)
        if not with_divergence:
            return score
        div = (
            -resp @ self.trace_prec
            + np.einsum("nk,nka,nka->n", resp, grads, grads)
            - np.einsum("na,na->n", score, score)
        )
        return score, div


def mixture_score(law: GaussianMixtureLaw, z) -> np.ndarray:
    """``grad_z log sum_j w_j N(z; m_j, C_j)`` with log-sum-exp stabilisation."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    out = _MixtureTerms(law).evaluate(np.atleast_2d(z))
    return out[0] if single else out


class ScoreField:
    """Interface: ``score(z, t)`` for (N, d) arrays and its divergence."""

    kind = "generic"
    dim: int

    def score(self, z, t):
        raise NotImplementedError

    def divergence(self, z, t):
        return fd_divergence(self.score, z, t)

    def __call__(self, z, t):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return self.score(z[None], t)[0]
        return self.score(z, t)


def fd_divergence(fn, z, t, step=1e-5):
    z = np.atleast_2d(z)
    div = np.zeros(z.shape[0])
    for j in range(z.shape[1]):
        e = np.zeros(z.shape[1])
        e[j] = step
        div += (fn(z + e, t)[:, j] - fn(z - e, t)[:, j]) / (2 * step)
    return div


class MixtureScore(ScoreField):
    """Exact score of the diffused Gaussian-mixture geometry reference law."""

    kind = "exact-mixture"

    def __init__(self, law: GaussianMixtureLaw, spec: ForwardDiffusionSpec | None = None):
        self.law = law
        self.spec = spec or ForwardDiffusionSpec()
        self.dim = law.dim
        self._cache: dict[float, _MixtureTerms] = {}

    def _terms(self, t) -> _MixtureTerms:
        key = float(t)
        terms = self._cache.get(key)
        if terms is None:
            terms = _MixtureTerms(diffused_mixture(self.law, key, self.spec))
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = terms
        return terms

    def score(self, z, t):
        return self._terms(t).evaluate(np.atleast_2d(z))

    def divergence(self, z, t):
        return self._terms(t).evaluate(np.atleast_2d(z), with_divergence=True)[1]

    @property
    def is_single_gaussian(self) -> bool:
        return self.law.n_components == 1


class CallableScore(ScoreField):
    kind = "callable"

    def __init__(self, fn, dim: int, divergence_fn=None):
        self.fn = fn
        self.dim = dim
        self.divergence_fn = divergence_fn

    def score(self, z, t):
        return np.asarray(self.fn(np.atleast_2d(z), t), dtype=float)

    def divergence(self, z, t):
        if self.divergence_fn is not None:
            return np.asarray(self.divergence_fn(np.atleast_2d(z), t), dtype=float)
        return fd_divergence(self.score, z, t)


class PerturbedScore(ScoreField):
    """``base + eps * perturbation`` with a known direction.

    ``linear-tilt`` adds ``eps * v``; ``rotation`` adds ``eps * W s`` with ``W``
    the skew generator of rotations in the (e1, e2) plane. Neither changes the
    divergence (the tilt is constant in z, and ``tr(W H) = 0`` for symmetric
    ``H``). ``time_scaling="noise"`` divides the tilt by the forward noise
    standard deviation ``sqrt(1 - alpha_t^2)`` (floored at ``time_floor``),
    which mimics an error of size ``eps`` in a noise-prediction network.
    """

    kind = "perturbed"

    def __init__(self, base: ScoreField, eps: float, mode: str = "linear-tilt",
                 direction=None, time_scaling: str = "none", spec=None, time_floor: float = 1e-3):
        if eps < 0:
            raise ConfigError("perturbation amplitude must be >= 0", key="eps")
        if mode not in ("linear-tilt", "rotation"):
            raise ConfigError(f"unknown perturbation mode {mode!r}", key="mode")
        if time_scaling not in ("none", "noise"):
            raise ConfigError(f"unknown time scaling {time_scaling!r}", key="time_scaling")
        self.base = base
        self.eps = float(eps)
        self.mode = mode
        self.dim = base.dim
        self.time_scaling = time_scaling
        self.spec = spec or getattr(base, "spec", None) or ForwardDiffusionSpec()
        self.time_floor = time_floor
        if mode == "rotation" and self.dim < 2:
            raise ConfigError("rotation perturbation needs dimension >= 2", key="mode")
        if direction is None:
            direction = np.eye(self.dim)[0]
        direction = np.asarray(direction, dtype=float)
        self.direction = direction / np.linalg.norm(direction)
        gen = np.zeros((self.dim, self.dim))
        if self.dim >= 2:
            gen[0, 1], gen[1, 0] = -1.0, 1.0
        self.generator = gen

    def _time_factor(self, t):
        if self.time_scaling == "none":
            return 1.0
        return 1.0 / np.sqrt(self.spec.noise_var(max(float(t), self.time_floor)))

    def score(self, z, t):
        base = self.base.score(z, t)
        if self.eps == 0.0:
            return base
        if self.mode == "linear-tilt":
            return base + self.eps * self._time_factor(t) * self.direction[None]
        return base + self.eps * self._time_factor(t) * base @ self.generator.T

    def divergence(self, z, t):
        return self.base.divergence(z, t)


def perturb_score(base: ScoreField, eps: float, mode: str = "linear-tilt", **kwargs) -> ScoreField:
    if eps == 0:
        return base
    return PerturbedScore(base, eps, mode, **kwargs)


def default_ridge(cov: np.ndarray) -> np.ndarray:
    """``1e-3 * trace / d`` per covariance, floored away from zero."""
    d = cov.shape[-1]
    return np.maximum(1e-3 * np.trace(cov, axis1=-2, axis2=-1) / d, 1e-12)


def neighborhood_covariances(points: np.ndarray, anchors: np.ndarray, k_nn: int, ridge=None) -> np.ndarray:
    """Covariance of the ``k_nn`` nearest ``points`` to each anchor, plus ridge."""
    points = np.atleast_2d(points)
    anchors = np.atleast_2d(anchors)
    m, d = points.shape
    if k_nn < 2:
        raise ConfigError("k_nn must be >= 2", key="k_nn")
    if m < k_nn:
        raise NotEnoughNeighborsError(f"only {m} arm units available, need k_nn={k_nn}")
    _, idx = cKDTree(points).query(anchors, k=k_nn)
    nb = points[np.asarray(idx).reshape(anchors.shape[0], k_nn)]  # (g, k, d)
    dev = nb - nb.mean(axis=1, keepdims=True)
    out = np.einsum("gka,gkb->gab", dev, dev) / (k_nn - 1)
    lam = default_ridge(out) if ridge is None else np.full(anchors.shape[0], float(ridge))
    if np.any(lam < 0):
        raise ConfigError("ridge must be >= 0", key="ridge")
    out += lam[:, None, None] * np.eye(d)[None]
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def fit_pca_proxy(batch: ObservationBatch, arm: int, anchor, k_nn: int, ridge=None) -> np.ndarray:
    """Neighbourhood covariance at ``anchor`` from the treated-arm outcomes."""
    pts = batch.y[batch.arm_mask(arm)]
    return neighborhood_covariances(pts, np.atleast_2d(anchor), k_nn, ridge)[0]


def pca_proxy_score(anchor, cov, spec: ForwardDiffusionSpec | None = None) -> MixtureScore:
    """Local Gaussian geometry N(anchor, cov) as a score field."""
    field = MixtureScore(GaussianMixtureLaw.gaussian(anchor, cov), spec)
    field.kind = "pca-proxy"
    return field
