"""Gaussian-multiplier simultaneous confidence bands and their inflation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import as_seed_policy, parallel_map
from .errors import ConfigError, DegenerateVarianceError


@dataclass(frozen=True, eq=False)
class BandResult:
    """Simultaneous band ``center +/- (c_hat sigma / sqrt(n) + envelope)``.

    ``radius`` is the studentized part only; ``envelope`` is the additive
    inflation (zero for an uninflated band).
    """

    center: np.ndarray
    sigma: np.ndarray
    c_hat: float
    radius: np.ndarray
    alpha: float
    B: int
    n: int
    envelope: np.ndarray | float = 0.0
    labels: tuple | None = None

    @property
    def half_width(self) -> np.ndarray:
        return self.radius + self.envelope

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width

    def covers(self, target) -> bool:
        return bool(np.all(np.abs(self.center - np.asarray(target)) <= self.half_width))

    def to_csv(self, path) -> None:
        hw = np.broadcast_to(self.half_width, self.center.shape)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("point_id,center,sigma,radius,lower,upper\n")
            for i in range(self.center.size):
                pid = i if self.labels is None else self.labels[i]
                fh.write(f"{pid},{float(self.center[i])!r},{float(self.sigma[i])!r},{float(hw[i])!r},"
                         f"{float(self.center[i] - hw[i])!r},{float(self.center[i] + hw[i])!r}\n")

    def summary(self) -> dict:
        env = self.envelope
        env = float(env) if np.ndim(env) == 0 else np.asarray(env).tolist()
        return {"alpha": self.alpha, "B": self.B, "c_hat": self.c_hat, "envelope": env, "n": self.n}

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def critical_index(alpha: float, B: int) -> int:
    """Order-statistic index ``ceil((1 - alpha)(B + 1)) - 1`` clipped to the sample."""
    return min(B - 1, max(0, math.ceil((1 - alpha) * (B + 1)) - 1))


def multiplier_matrix(seed, n: int, replications, ) -> np.ndarray:
    """Standard-normal multipliers, one independent substream per replication."""
    policy = as_seed_policy(seed)
    return np.stack([policy.generator("multipliers", n, int(b)).standard_normal(n) for b in replications])


def sup_statistics(influence, sigma, seed, B: int, workers: int = 1, chunk: int = 250) -> np.ndarray:
    """``max_j |n^{-1/2} sum_i xi_i phi_ij| / sigma_j`` for each replication."""
    n = influence.shape[0]
    blocks = [range(s, min(B, s + chunk)) for s in range(0, B, chunk)]

    def run(block):
        xi = multiplier_matrix(seed, n, block)
        z = xi @ influence / math.sqrt(n)
        return np.max(np.abs(z) / sigma, axis=1)

    return np.concatenate(parallel_map(run, blocks, workers))


def _prepare(influence, check_centered: bool):
    phi = np.asarray(influence, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    phi = phi.reshape(phi.shape[0], -1)
    if check_centered:
        mean = np.abs(phi.mean(axis=0))
        scale = np.maximum(np.abs(phi).max(axis=0), 1.0)
        if np.any(mean > 1e-10 * scale):
            raise ConfigError("influence values must be centered per point", key="influence")
    sigma = np.sqrt((phi**2).mean(axis=0))
    floor = 1e-12 + 1e-6 * sigma.max()
    bad = np.flatnonzero(sigma <= floor)
    if bad.size:
        raise DegenerateVarianceError(f"influence variance below floor at point {int(bad[0])}", int(bad[0]))
    return phi, sigma


def multiplier_band(influence, alpha: float = 0.05, B: int = 1000, seed=0, center=None,
                    workers: int = 1, labels=None) -> BandResult:
    """Simultaneous band from centered per-unit influence values (n, P)."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)", key="alpha")
    if B < 1:
        raise ConfigError("B must be positive", key="B")
    phi, sigma = _prepare(influence, check_centered=True)
    n = phi.shape[0]
    stats = np.sort(sup_statistics(phi, sigma, seed, B, workers))
    c_hat = float(stats[critical_index(alpha, B)])
    center = np.zeros(phi.shape[1]) if center is None else np.asarray(center, dtype=float).ravel()
    return BandResult(center, sigma, c_hat, c_hat * sigma / math.sqrt(n), alpha, B, n, 0.0,
                      None if labels is None else tuple(labels))


def density_band(estimate, alpha: float = 0.05, B: int = 1000, seed=0, workers: int = 1) -> BandResult:
    return multiplier_band(estimate.centered_influence(), alpha, B, seed, estimate.values, workers)


def stein_band(estimates, alpha: float = 0.05, B: int = 1000, seed=0, workers: int = 1) -> BandResult:
    """Simultaneous band over a test class from a list of ``SteinEstimate``."""
    phi = np.stack([e.influence for e in estimates], axis=1)
    center = np.array([e.value for e in estimates])
    return multiplier_band(phi, alpha, B, seed, center, workers, labels=[e.g_id for e in estimates])


def inflate_band(band: BandResult, envelope) -> BandResult:
    """Add ``envelope`` (scalar or per point) to the band half-width."""
    env = np.asarray(envelope, dtype=float)
    if np.any(env < 0) or not np.all(np.isfinite(env)):
        raise ConfigError("envelope must be finite and nonnegative", key="envelope")
    env = float(env) if env.ndim == 0 else env
    return replace(band, envelope=band.envelope + env)


def density_envelope(delta_nuis=0.0, delta_geom=0.0):
    """Envelope for a density band: nuisance remainder plus geometry drift."""
    return np.asarray(delta_nuis) + np.asarray(delta_geom)


def stein_envelope(delta_psi_nuis=0.0, delta_p_geom=0.0, delta_g_geom=0.0, m_div=0.0, m_g=0.0):
    """Envelope for a Stein band; ``m_div``, ``m_g`` bound ``int |div g|`` and ``int |g|``."""
    return np.asarray(delta_psi_nuis) + m_div * np.asarray(delta_p_geom) + m_g * np.asarray(delta_g_geom)


def test_field_bounds(fields, grid):
    """Per-field quadrature bounds ``(int |div g|, int |g|)`` over the grid."""
    m_div = np.array([grid.weights @ np.abs(f.divergence(grid.points)) for f in fields])
    m_g = np.array([grid.weights @ np.linalg.norm(f.value(grid.points), axis=1) for f in fields])
    return m_div, m_g


test_field_bounds.__test__ = False
