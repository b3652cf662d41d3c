"""Smoothing kernels ``kappa(y; u)`` and their diagnostics.

Every kernel maps evaluation points ``y`` (G, d) and anchors ``u`` (n, d) to an
(n, G) matrix of densities, and exposes the y-gradient as an (n, G, d) array.
``gaussian_average`` returns ``E kappa(y; U)`` for Gaussian ``U`` in closed
form, which is what the population oracles and oracle nuisances are built
from.

The transported kernel is ``q_eps(Phi^{-1}(y) | u) * |det grad Phi^{-1}(y)|``.
Since ``Phi^{-1}`` does not depend on ``u``, the flow is integrated once per
evaluation point and cached.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, InsufficientScalesError, OracleUnavailableError, SingularMomentsError
from .flow import CLEAN_TO_NOISY, NOISY_TO_CLEAN, ForwardDiffusionSpec, reverse_flow
from .scores import MixtureScore, ScoreField, neighborhood_covariances

LOG_2PI = math.log(2 * math.pi)
_CHUNK = 4_000_000


def _points_key(points: np.ndarray) -> tuple:
    points = np.ascontiguousarray(points, dtype=float)
    return points.shape, hashlib.blake2b(points.tobytes(), digest_size=16).hexdigest()


def _chunks(n: int, per_row: int):
    size = max(1, _CHUNK // max(per_row, 1))
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def gaussian_logpdf_shared(points, centers, cov) -> np.ndarray:
    """(n, G) matrix of ``log N(points_g; centers_i, cov)``."""
    points = np.atleast_2d(points)
    centers = np.atleast_2d(centers)
    chol = np.linalg.cholesky(cov)
    a = np.linalg.solve(chol, points.T).T
    b = np.linalg.solve(chol, centers.T).T
    logdet = 2 * np.log(np.diag(chol)).sum()
    maha = (a * a).sum(1)[None, :] + (b * b).sum(1)[:, None] - 2 * b @ a.T
    np.maximum(maha, 0.0, out=maha)
    return -0.5 * (maha + logdet + points.shape[1] * LOG_2PI)


def gaussian_logpdf_pointwise(points, centers, precisions, logdets) -> np.ndarray:
    """(n, G) matrix with a separate covariance for every evaluation point."""
    points = np.atleast_2d(points)
    centers = np.atleast_2d(centers)
    G, d = points.shape
    py = np.einsum("gab,gb->ga", precisions, points)
    quad_y = (points * py).sum(1)
    flat = precisions.reshape(G, d * d)
    cross = centers @ py.T
    quad_u = np.einsum("na,nb->nab", centers, centers).reshape(-1, d * d) @ flat.T
    maha = quad_y[None] - 2 * cross + quad_u
    np.maximum(maha, 0.0, out=maha)
    return -0.5 * (maha + logdets[None] + d * LOG_2PI)


def gaussian_logpdf_per_center(points, centers, precisions, logdets) -> np.ndarray:
    """(n, G) matrix with a separate covariance for every anchor."""
    return gaussian_logpdf_pointwise(centers, points, precisions, logdets).T


class Kernel:
    """Interface shared by all smoothing kernels."""

    label = "kernel"
    dim: int
    h: float

    def evaluate(self, points, u) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points, u) -> np.ndarray:
        raise NotImplementedError

    def gaussian_average(self, points, means, cov) -> np.ndarray:
        raise OracleUnavailableError(f"{self.label} kernel has no closed-form Gaussian average")

    def gaussian_average_grad(self, points, means, cov) -> np.ndarray:
        raise OracleUnavailableError(f"{self.label} kernel has no closed-form Gaussian average")

    def sample(self, u, count, rng) -> np.ndarray:
        raise NotImplementedError

    def mixture_average(self, points, law) -> np.ndarray:
        """``E kappa(y; U)`` for ``U`` drawn from a Gaussian mixture."""
        out = np.zeros(np.atleast_2d(points).shape[0])
        for w, m, c in zip(law.weights, law.means, law.covariances):
            out += w * self.gaussian_average(points, m[None], c)[0]
        return out

    def mixture_average_grad(self, points, law) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros(pts.shape)
        for w, m, c in zip(law.weights, law.means, law.covariances):
            out += w * self.gaussian_average_grad(pts, m[None], c)[0]
        return out

    def describe(self) -> dict:
        return {"label": self.label, "h": getattr(self, "h", None)}


class GaussianKernel(Kernel):
    """``N(y; u, cov)`` with a fixed covariance."""

    label = "aniso"

    def __init__(self, cov, h: float | None = None):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("kernel covariance is not positive definite") from exc
        self.cov = cov
        self.prec = np.linalg.inv(cov)
        self.dim = cov.shape[0]
        self.h = float(np.sqrt(np.trace(cov) / self.dim)) if h is None else float(h)

    def evaluate(self, points, u):
        return np.exp(gaussian_logpdf_shared(points, u, self.cov))

    def gradient(self, points, u):
        points = np.atleast_2d(points)
        u = np.atleast_2d(u)
        val = self.evaluate(points, u)
        py = points @ self.prec
        pu = u @ self.prec
        return -(py[None, :, :] - pu[:, None, :]) * val[..., None]

    def gaussian_average(self, points, means, cov):
        return np.exp(gaussian_logpdf_shared(points, means, np.asarray(cov) + self.cov))

    def gaussian_average_grad(self, points, means, cov):
        total = np.asarray(cov) + self.cov
        prec = np.linalg.inv(total)
        points = np.atleast_2d(points)
        means = np.atleast_2d(means)
        val = np.exp(gaussian_logpdf_shared(points, means, total))
        return -((points @ prec)[None] - (means @ prec)[:, None]) * val[..., None]

    def sample(self, u, count, rng):
        u = np.asarray(u, dtype=float)
        return u + rng.standard_normal((count, self.dim)) @ self.chol.T

    def describe(self):
        return {"label": self.label, "h": self.h, "cov": self.cov.tolist()}


class IsotropicKernel(GaussianKernel):
    """``N(y; u, h^2 I)``."""

    label = "iso"

    def __init__(self, h: float, dim: int):
        if h <= 0:
            raise ConfigError("bandwidth must be positive", key="h")
        super().__init__(h**2 * np.eye(dim), h=h)

    def describe(self):
        return {"label": self.label, "h": self.h, "dim": self.dim}


def iso_kernel_eval(h, y, u) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(IsotropicKernel(h, y.size).evaluate(y[None], np.atleast_1d(u)[None])[0, 0])


def aniso_kernel_eval(cov, y, u) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(GaussianKernel(cov).evaluate(y[None], np.atleast_1d(u)[None])[0, 0])


def gaussian_square_integral(cov) -> float:
    """``int N(y; u, cov)^2 dy = (4 pi)^{-d/2} det(cov)^{-1/2}``."""
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    return float((4 * np.pi) ** (-d / 2) / np.sqrt(np.linalg.det(cov)))


def transported_gaussian_cov(local_cov, spec: ForwardDiffusionSpec, h: float) -> np.ndarray:
    """Covariance of the transported kernel under a Gaussian geometry ``local_cov``.

    Equals ``v C (alpha^2 C + v I)^{-1}`` with ``v = 1 - alpha^2`` at diffusion
    time ``eps_h``: about ``h^2`` along directions where ``C`` is wide and
    saturating at the eigenvalue of ``C`` along thin ones.
    """
    eps = spec.diffusion_time(h)
    v = float(spec.noise_var(eps))
    a2 = 1.0 - v
    lam, vec = np.linalg.eigh(local_cov)
    lam = np.maximum(lam, 0.0)
    shrunk = v * lam / (a2 * lam + v)
    return np.einsum("...ab,...b,...cb->...ac", vec, shrunk, vec)


class LocalPCAKernel(Kernel):
    """Gaussian kernel with neighbourhood-PCA covariance.

    The local covariance ``C`` is estimated from the ``k_nn`` nearest points of
    ``geometry_sample`` to each anchor and mapped to the bandwidth-``h``
    kernel covariance with :func:`transported_gaussian_cov`. With
    ``anchor="evaluation"`` (default) the covariance is attached to the
    evaluation point and held fixed when differentiating in ``y``; with
    ``anchor="data"`` it is attached to the data point, so each
    ``kappa(.; u)`` is an exact Gaussian density.
    """

    label = "pca"

    def __init__(self, geometry_sample, h: float, k_nn: int = 50, ridge=None,
                 spec: ForwardDiffusionSpec | None = None, anchor: str = "evaluation"):
        if anchor not in ("evaluation", "data"):
            raise ConfigError(f"unknown anchor mode {anchor!r}", key="anchor")
        self.geometry_sample = np.atleast_2d(np.asarray(geometry_sample, dtype=float))
        self.dim = self.geometry_sample.shape[1]
        self.h = float(h)
        self.k_nn = int(k_nn)
        self.ridge = ridge
        self.spec = spec or ForwardDiffusionSpec()
        self.spec.diffusion_time(h)
        self.anchor = anchor
        self._cache: dict = {}
        self._lock = threading.Lock()

    def local_covariances(self, anchors) -> np.ndarray:
        anchors = np.atleast_2d(anchors)
        key = _points_key(anchors)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit[0]
        local = neighborhood_covariances(self.geometry_sample, anchors, self.k_nn, self.ridge)
        cov = transported_gaussian_cov(local, self.spec, self.h)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        prec = np.linalg.inv(cov)
        logdet = np.linalg.slogdet(cov)[1]
        with self._lock:
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = (cov, prec, logdet)
        return cov

    def _factors(self, anchors):
        self.local_covariances(anchors)
        return self._cache[_points_key(np.atleast_2d(anchors))]

    def with_bandwidth(self, h: float) -> "LocalPCAKernel":
        return LocalPCAKernel(self.geometry_sample, h, self.k_nn, self.ridge, self.spec, self.anchor)

    def evaluate(self, points, u):
        points, u = np.atleast_2d(points), np.atleast_2d(u)
        if self.anchor == "evaluation":
            _, prec, logdet = self._factors(points)
            return np.exp(gaussian_logpdf_pointwise(points, u, prec, logdet))
        _, prec, logdet = self._factors(u)
        return np.exp(gaussian_logpdf_per_center(points, u, prec, logdet))

    def gradient(self, points, u):
        points, u = np.atleast_2d(points), np.atleast_2d(u)
        val = self.evaluate(points, u)
        if self.anchor == "evaluation":
            _, prec, _ = self._factors(points)
            py = np.einsum("gab,gb->ga", prec, points)
            pu = np.einsum("gab,nb->nga", prec, u)
            return -(py[None] - pu) * val[..., None]
        _, prec, _ = self._factors(u)
        py = np.einsum("nab,gb->nga", prec, points)
        pu = np.einsum("nab,nb->na", prec, u)
        return -(py - pu[:, None]) * val[..., None]

    def gaussian_average(self, points, means, cov):
        if self.anchor != "evaluation":
            raise OracleUnavailableError("data-anchored PCA kernel has no closed-form average")
        points, means = np.atleast_2d(points), np.atleast_2d(means)
        kcov = self.local_covariances(points)
        total = kcov + np.asarray(cov)[None]
        prec = np.linalg.inv(total)
        logdet = np.linalg.slogdet(total)[1]
        return np.exp(gaussian_logpdf_pointwise(points, means, prec, logdet))

    def gaussian_average_grad(self, points, means, cov):
        points, means = np.atleast_2d(points), np.atleast_2d(means)
        if self.anchor != "evaluation":
            raise OracleUnavailableError("data-anchored PCA kernel has no closed-form average")
        kcov = self.local_covariances(points)
        total = kcov + np.asarray(cov)[None]
        prec = np.linalg.inv(total)
        logdet = np.linalg.slogdet(total)[1]
        val = np.exp(gaussian_logpdf_pointwise(points, means, prec, logdet))
        py = np.einsum("gab,gb->ga", prec, points)
        pm = np.einsum("gab,nb->nga", prec, means)
        return -(py[None] - pm) * val[..., None]

    def sample(self, u, count, rng):
        u = np.asarray(u, dtype=float)
        if self.anchor == "evaluation":
            raise NotImplementedError("evaluation-anchored kernels are not densities in y")
        cov = self.local_covariances(u[None])[0]
        return u + rng.standard_normal((count, self.dim)) @ np.linalg.cholesky(cov).T

    def describe(self):
        return {"label": self.label, "h": self.h, "k_nn": self.k_nn, "ridge": self.ridge,
                "anchor": self.anchor, "geometry_size": int(self.geometry_sample.shape[0])}


@dataclass
class _Pullback:
    z: np.ndarray
    logdet: np.ndarray


class TransportedKernel(Kernel):
    """Forward transition pushed through the reverse probability flow.

    ``kappa(y; u) = N(Phi^{-1}(y); alpha u, (1 - alpha^2) I) * J(y)`` with the
    flow driven by ``score`` and diffusion time ``eps_h``.
    """

    label = "transported"

    def __init__(self, score: ScoreField, h: float, spec: ForwardDiffusionSpec | None = None,
                 steps: int = 64, fd_rel_step: float = 1e-4, analytic_affine: bool = True):
        self.score = score
        self.spec = spec or getattr(score, "spec", None) or ForwardDiffusionSpec()
        self.h = float(h)
        self.eps = self.spec.diffusion_time(h)
        self.alpha = float(self.spec.alpha(self.eps))
        self.var = float(self.spec.noise_var(self.eps))
        self.steps = int(steps)
        self.dim = score.dim
        self.fd_step = fd_rel_step * self.h
        self.analytic_affine = analytic_affine
        self._cache: dict = {}
        self._lock = threading.Lock()

    def with_bandwidth(self, h: float) -> "TransportedKernel":
        return TransportedKernel(self.score, h, self.spec, self.steps, self.fd_step / self.h,
                                 self.analytic_affine)

    # flow -----------------------------------------------------------------
    def pullback(self, points) -> _Pullback:
        """``Phi^{-1}(y)`` and ``log J(y)`` for every row of ``points`` (cached)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        key = _points_key(points)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        z, logdet = reverse_flow(self.spec, self.score, self.eps, points, CLEAN_TO_NOISY, self.steps)
        out = _Pullback(z, logdet)
        with self._lock:
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = out
        return out

    def push(self, noisy) -> np.ndarray:
        z, _ = reverse_flow(self.spec, self.score, self.eps, np.atleast_2d(noisy), NOISY_TO_CLEAN, self.steps)
        return z

    def affine_map(self):
        """``(M, c)`` with ``Phi^{-1}(y) = M y + c`` for single-Gaussian geometry, else None."""
        if not (isinstance(self.score, MixtureScore) and self.score.is_single_gaussian):
            return None
        S = self.score.law.covariances[0]
        m = self.score.law.means[0]
        lam, vec = np.linalg.eigh(S)
        lam_t = self.alpha**2 * lam + self.var
        M = (vec * np.sqrt(lam_t / lam)) @ vec.T
        return M, self.alpha * m - M @ m

    def _stencil(self, points):
        points = np.atleast_2d(points)
        d = points.shape[1]
        offsets = np.concatenate([np.eye(d), -np.eye(d)]) * self.fd_step
        return (points[None] + offsets[:, None]).reshape(-1, d)

    # evaluation -----------------------------------------------------------
    def log_evaluate(self, points, u):
        pb = self.pullback(points)
        logq = gaussian_logpdf_shared(pb.z, self.alpha * np.atleast_2d(u), self.var * np.eye(self.dim))
        return logq + pb.logdet[None]

    def evaluate(self, points, u):
        return np.exp(self.log_evaluate(points, u))

    def _use_affine(self):
        return self.analytic_affine and self.affine_map() is not None

    def gradient(self, points, u):
        points, u = np.atleast_2d(points), np.atleast_2d(u)
        if self._use_affine():
            M, _ = self.affine_map()
            pb = self.pullback(points)
            val = np.exp(gaussian_logpdf_shared(pb.z, self.alpha * u, self.var * np.eye(self.dim))
                         + pb.logdet[None])
            diff = pb.z[None] - self.alpha * u[:, None]
            return -(diff @ M) / self.var * val[..., None]
        return self.fd_gradient(points, u)

    def fd_gradient(self, points, u):
        points, u = np.atleast_2d(points), np.atleast_2d(u)
        G, d = points.shape
        vals = self.evaluate(self._stencil(points), u).reshape(u.shape[0], 2 * d, G)
        return np.moveaxis((vals[:, :d] - vals[:, d:]) / (2 * self.fd_step), 1, 2)

    def gaussian_average(self, points, means, cov):
        pb = self.pullback(points)
        total = self.alpha**2 * np.asarray(cov) + self.var * np.eye(self.dim)
        return np.exp(gaussian_logpdf_shared(pb.z, self.alpha * np.atleast_2d(means), total)
                      + pb.logdet[None])

    def gaussian_average_grad(self, points, means, cov):
        points, means = np.atleast_2d(points), np.atleast_2d(means)
        G, d = points.shape
        if self._use_affine():
            M, _ = self.affine_map()
            pb = self.pullback(points)
            total = self.alpha**2 * np.asarray(cov) + self.var * np.eye(d)
            prec = np.linalg.inv(total)
            val = np.exp(gaussian_logpdf_shared(pb.z, self.alpha * means, total) + pb.logdet[None])
            diff = pb.z[None] - self.alpha * means[:, None]
            return -(diff @ prec @ M) * val[..., None]
        vals = self.gaussian_average(self._stencil(points), means, cov).reshape(means.shape[0], 2 * d, G)
        return np.moveaxis((vals[:, :d] - vals[:, d:]) / (2 * self.fd_step), 1, 2)

    def sample(self, u, count, rng):
        u = np.asarray(u, dtype=float)
        noisy = self.alpha * u + np.sqrt(self.var) * rng.standard_normal((count, self.dim))
        return self.push(noisy)

    def describe(self):
        out = {"label": self.label, "h": self.h, "steps": self.steps, "score_kind": self.score.kind}
        if isinstance(self.score, MixtureScore):
            out["geometry"] = self.score.law.to_dict()
        return out


def kernel_eval(kernel: Kernel, y, u) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(kernel.evaluate(y[None], u[None])[0, 0])


def kernel_grad(kernel: Kernel, y, u) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return kernel.gradient(y[None], u[None])[0, 0]


def kernel_sample(kernel: Kernel, u, count: int, seed) -> np.ndarray:
    from .core import as_seed_policy

    if count < 1:
        raise ConfigError("count must be >= 1", key="count")
    rng = seed if isinstance(seed, np.random.Generator) else as_seed_policy(seed).generator("kernel-sample")
    return kernel.sample(np.atleast_1d(u), count, rng)


@dataclass
class KernelMoments:
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    count: int
    mean_se: np.ndarray
    covariance_se: np.ndarray


def kernel_moments(kernel: Kernel, anchor, mc_count: int, seed, floor_rel: float = 1e-10) -> KernelMoments:
    if mc_count < 100:
        raise ConfigError("mc_count must be >= 100", key="mc_count")
    draws = kernel_sample(kernel, anchor, mc_count, seed)
    mean = draws.mean(axis=0)
    dev = draws - mean
    cov = dev.T @ dev / (mc_count - 1)
    cov = 0.5 * (cov + cov.T)
    floor = floor_rel * np.trace(cov) / cov.shape[0]
    if np.min(np.linalg.eigvalsh(cov)) <= floor:
        raise SingularMomentsError("kernel covariance below the SPD floor")
    outer = np.einsum("na,nb->nab", dev, dev)
    cov_se = outer.std(axis=0, ddof=1) / np.sqrt(mc_count)
    return KernelMoments(mean, cov, np.linalg.inv(cov), mc_count,
                         dev.std(axis=0, ddof=1) / np.sqrt(mc_count), cov_se)


def unit_ball_volume(d: int) -> float:
    return float(np.exp(d / 2 * np.log(np.pi) - gammaln(d / 2 + 1)))


def ellipsoid_volume(precision, c: float) -> float:
    """``Vol{(u-m)' G (u-m) <= c} = Vol(B_d) c^{d/2} det(G)^{-1/2}``."""
    G = np.atleast_2d(precision)
    d = G.shape[0]
    return unit_ball_volume(d) * c ** (d / 2) / math.sqrt(np.linalg.det(G))


def mc_ellipsoid_volume(precision, c: float, count: int, rng) -> tuple[float, float]:
    """Hit-or-miss volume inside the bounding box of the ellipsoid; returns (vol, se)."""
    G = np.atleast_2d(precision)
    half = np.sqrt(c * np.diag(np.linalg.inv(G)))
    pts = rng.uniform(-1, 1, size=(count, G.shape[0])) * half
    hit = np.einsum("na,ab,nb->n", pts, G, pts) <= c
    box = float(np.prod(2 * half))
    frac = hit.mean()
    return frac * box, box * math.sqrt(frac * (1 - frac) / count)


def kernel_square_integral(kernel: Kernel, u, grid) -> float:
    vals = kernel.evaluate(grid.points, np.atleast_2d(u))[0]
    return float(grid.weights @ vals**2)


@dataclass
class PeakinessReport:
    h: np.ndarray
    H: np.ndarray
    d_eff: np.ndarray
    slope: float
    Hs: np.ndarray | None = None
    ds_eff: np.ndarray | None = None
    slope_s: float | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("h,H,Hs,d_eff\n")
            for i in range(self.h.size):
                hs = "" if self.Hs is None else repr(float(self.Hs[i]))
                fh.write(f"{self.h[i]!r},{float(self.H[i])!r},{hs},{float(self.d_eff[i])!r}\n")


def effective_dimension(H, h):
    H = np.asarray(H, dtype=float)
    h = np.asarray(h, dtype=float)
    return np.log(np.maximum(H, 1.0)) / np.log(1.0 / h)


def loglog_slope(h, H) -> float:
    """Least-squares slope of ``log H`` on ``log(1/h)``."""
    h = np.asarray(h, dtype=float)
    if np.unique(h).size < 2:
        raise InsufficientScalesError("need at least two distinct bandwidths")
    x = np.log(1.0 / h)
    y = np.log(np.asarray(H, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def peakiness(kernel_for_h: Callable[[float], Kernel], h_values: Sequence[float], law_samples, grid,
              include_score: bool = False, chunk: int = 64) -> PeakinessReport:
    """Average grid quadrature of ``kappa(y; Y_i)^2`` over law samples, per bandwidth."""
    h_values = np.asarray(h_values, dtype=float)
    if np.unique(h_values).size < 2:
        raise InsufficientScalesError("peakiness slopes need at least two distinct bandwidths")
    if grid.dim > 3:
        raise ConfigError("peakiness region dimension must be <= 3", key="dim")
    law_samples = np.atleast_2d(law_samples)
    H = np.empty(h_values.size)
    Hs = np.empty(h_values.size) if include_score else None
    for j, h in enumerate(h_values):
        kern = kernel_for_h(float(h))
        acc = acc_s = 0.0
        for start in range(0, law_samples.shape[0], chunk):
            u = law_samples[start:start + chunk]
            vals = kern.evaluate(grid.points, u)
            acc += float((vals**2 @ grid.weights).sum())
            if include_score:
                grads = kern.gradient(grid.points, u)
                acc_s += float(((grads**2).sum(axis=2) @ grid.weights).sum())
        H[j] = acc / law_samples.shape[0]
        if include_score:
            Hs[j] = H[j] + acc_s / law_samples.shape[0]
    report = PeakinessReport(h_values, H, effective_dimension(H, h_values), loglog_slope(h_values, H))
    if include_score:
        report.Hs = Hs
        report.ds_eff = effective_dimension(Hs, h_values)
        report.slope_s = loglog_slope(h_values, Hs)
    return report
