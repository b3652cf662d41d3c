import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from geosmooth.core import EvaluationRegion, make_grid
from geosmooth.errors import ConfigError, InsufficientScalesError, OracleUnavailableError
from geosmooth.flow import ForwardDiffusionSpec
from geosmooth.kernels import (GaussianKernel, IsotropicKernel, LocalPCAKernel, TransportedKernel,
                               aniso_kernel_eval, ellipsoid_volume, gaussian_square_integral, iso_kernel_eval,
                               kernel_eval, kernel_grad, kernel_moments, kernel_sample, kernel_square_integral,
                               mc_ellipsoid_volume, peakiness, transported_gaussian_cov, unit_ball_volume)
from geosmooth.scores import GaussianMixtureLaw, MixtureScore

SPEC = ForwardDiffusionSpec()
MIX = GaussianMixtureLaw([0.4, 0.6], [[-1.0, 0.0], [1.0, 0.5]], [np.eye(2) * 0.4, [[0.6, 0.2], [0.2, 0.3]]])


def transported(law, h, **kw):
    return TransportedKernel(MixtureScore(law, SPEC), h, SPEC, **kw)


class TestGaussianKernels:
    def test_standard_normal_peak(self):
        assert iso_kernel_eval(1.0, [0.0], [0.0]) == pytest.approx(0.398942, abs=1e-6)

    def test_iso_is_aniso_special_case(self):
        y, u = np.array([0.3, -0.2]), np.array([0.1, 0.4])
        assert iso_kernel_eval(0.5, y, u) == aniso_kernel_eval(0.25 * np.eye(2), y, u)

    def test_square_integral_by_quadrature(self):
        cov = np.array([[0.3, 0.1], [0.1, 0.2]])
        g = make_grid(EvaluationRegion([-4, -4], [4, 4], 300))
        vals = GaussianKernel(cov).evaluate(g.points, np.zeros((1, 2)))[0]
        assert g.weights @ vals**2 == pytest.approx(gaussian_square_integral(cov), rel=1e-6)

    def test_gradient_matches_finite_difference(self):
        k = GaussianKernel([[0.3, 0.1], [0.1, 0.2]])
        y, u = np.array([[0.2, -0.1]]), np.array([[0.5, 0.1]])
        step = 1e-6
        fd = [(k.evaluate(y + step * e, u) - k.evaluate(y - step * e, u))[0, 0] / (2 * step) for e in np.eye(2)]
        np.testing.assert_allclose(k.gradient(y, u)[0, 0], fd, rtol=1e-6)

    def test_gaussian_average_convolution(self):
        k = IsotropicKernel(0.4, 1)
        pts = np.linspace(-3, 3, 11)[:, None]
        ref = norm.pdf(pts[:, 0], 0.5, np.sqrt(2.0 + 0.16))
        np.testing.assert_allclose(k.gaussian_average(pts, np.array([[0.5]]), np.array([[2.0]]))[0], ref)
        # quadrature cross-check of the convolution identity
        u = np.linspace(-12, 12, 20001)
        w = norm.pdf(u, 0.5, np.sqrt(2.0)) * (u[1] - u[0])
        quad = k.evaluate(pts, u[:, None]).T @ w
        np.testing.assert_allclose(quad, ref, atol=1e-8)

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ConfigError):
            IsotropicKernel(0.0, 2)


class TestTransportedKernel:
    def test_identity_flow_equals_transition(self):
        k = transported(GaussianMixtureLaw.standard_normal(2), 0.4)
        y = np.random.default_rng(0).normal(size=(200, 2))
        u = np.array([[0.3, -0.5]])
        ref = multivariate_normal(k.alpha * u[0], k.var * np.eye(2)).pdf(y)
        np.testing.assert_allclose(k.evaluate(y, u)[0], ref, rtol=1e-8)

    def test_identity_flow_gradient(self):
        k = transported(GaussianMixtureLaw.standard_normal(2), 0.4, analytic_affine=False)
        y = np.random.default_rng(1).normal(size=(20, 2))
        u = np.array([[0.3, -0.5]])
        val = k.evaluate(y, u)[0]
        ref = -(y - k.alpha * u) / k.var * val[:, None]
        np.testing.assert_allclose(k.gradient(y, u)[0], ref, rtol=1e-4, atol=1e-10)

    def test_gradient_vanishes_at_mode(self):
        k = transported(GaussianMixtureLaw.standard_normal(1), 0.3)
        u = np.array([[0.8]])
        mode = k.alpha * u
        assert abs(kernel_grad(k, mode[0], u[0])[0]) <= 1e-3 * kernel_eval(k, mode[0], u[0]) / 0.3

    def test_affine_fd_matches_analytic(self):
        law = GaussianMixtureLaw.gaussian([0.0], [[4.0]])
        fast = transported(law, 0.5)
        slow = transported(law, 0.5, analytic_affine=False)
        y = np.linspace(-3, 3, 15)[:, None]
        u = np.array([[0.4], [-1.0]])
        np.testing.assert_allclose(slow.gradient(y, u), fast.gradient(y, u), rtol=1e-5, atol=1e-9)

    def test_affine_map_matches_flow(self):
        law = GaussianMixtureLaw.gaussian([0.5, -0.2], [[1.5, 0.5], [0.5, 0.6]])
        k = transported(law, 0.5)
        M, c = k.affine_map()
        y = np.random.default_rng(2).normal(size=(10, 2))
        np.testing.assert_allclose(k.pullback(y).z, y @ M.T + c, atol=1e-9)
        assert transported(MIX, 0.5).affine_map() is None

    @pytest.mark.parametrize("law", [GaussianMixtureLaw([0.4, 0.6], [[-1.0], [1.5]], [[[0.3]], [[0.6]]]), MIX],
                             ids=["d1", "d2"])
    def test_normalization(self, law):
        k = transported(law, 0.3)
        u = np.full((1, law.dim), 0.2)
        m = 4000 if law.dim == 1 else 250
        g = make_grid(EvaluationRegion(np.full(law.dim, -3.0), np.full(law.dim, 3.0), m))
        assert g.weights @ k.evaluate(g.points, u)[0] == pytest.approx(1.0, abs=1e-3)

    def test_gaussian_average_matches_monte_carlo(self):
        k = transported(MIX, 0.4)
        pts = np.array([[0.0, 0.0], [1.0, 0.5], [-1.0, 0.2]])
        mean, cov = np.array([0.3, 0.1]), np.array([[0.5, 0.1], [0.1, 0.4]])
        u = np.random.default_rng(3).multivariate_normal(mean, cov, size=40000)
        vals = k.evaluate(pts, u)
        se = vals.std(axis=0) / np.sqrt(u.shape[0])
        assert np.all(np.abs(k.gaussian_average(pts, mean[None], cov)[0] - vals.mean(axis=0)) <= 4 * se)

    def test_gaussian_average_grad_matches_fd(self):
        k = transported(MIX, 0.4)
        pts = np.array([[0.2, 0.1]])
        mean, cov = np.array([[0.3, 0.1]]), np.eye(2) * 0.5
        step = 1e-5
        fd = [(k.gaussian_average(pts + step * e, mean, cov) - k.gaussian_average(pts - step * e, mean, cov))[0, 0]
              / (2 * step) for e in np.eye(2)]
        np.testing.assert_allclose(k.gaussian_average_grad(pts, mean, cov)[0, 0], fd, rtol=1e-4)

    def test_sample_mean_identity_flow(self):
        k = transported(GaussianMixtureLaw.standard_normal(2), 0.5)
        u = np.array([0.6, -0.4])
        draws = kernel_sample(k, u, 10_000, 7)
        se = np.sqrt(k.var / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - k.alpha * u) <= 3 * se)

    def test_sample_histogram_matches_density(self):
        law = GaussianMixtureLaw([0.4, 0.6], [[-1.0], [1.5]], [[[0.3]], [[0.6]]])
        k = transported(law, 0.6)
        u = np.array([0.3])
        n = 20_000
        draws = np.sort(kernel_sample(k, u, n, 8)[:, 0])
        ys = np.linspace(draws[0] - 1, draws[-1] + 1, 4001)
        pdf = k.evaluate(ys[:, None], u[None])[0]
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(ys))])
        model = np.interp(draws, ys, cdf)
        ecdf_hi = np.arange(1, n + 1) / n
        ks = max(np.max(ecdf_hi - model), np.max(model - (ecdf_hi - 1 / n)))
        # Kolmogorov 0.001 critical value is 1.95 / sqrt(n)
        assert ks <= 1.95 / math.sqrt(n)

    def test_sampling_is_deterministic(self):
        k = transported(MIX, 0.4)
        np.testing.assert_array_equal(kernel_sample(k, [0.0, 0.0], 50, 3), kernel_sample(k, [0.0, 0.0], 50, 3))

    def test_pullback_cache_returns_same_object(self):
        k = transported(MIX, 0.3)
        y = np.zeros((3, 2))
        assert k.pullback(y) is k.pullback(y.copy())

    def test_with_bandwidth(self):
        k = transported(MIX, 0.3).with_bandwidth(0.2)
        assert k.h == 0.2 and k.eps == pytest.approx(0.04)


class TestMomentsAndVolumes:
    def test_unit_disk(self):
        assert ellipsoid_volume(np.eye(2), 1.0) == pytest.approx(math.pi)
        assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)

    def test_mc_volume(self):
        G = np.array([[2.0, 0.4], [0.4, 1.0]])
        vol, se = mc_ellipsoid_volume(G, 1.5, 200_000, np.random.default_rng(0))
        assert abs(vol - ellipsoid_volume(G, 1.5)) <= 4 * se

    def test_identity_flow_covariance(self):
        k = transported(GaussianMixtureLaw.standard_normal(2), 0.4)
        mom = kernel_moments(k, np.zeros(2), 20_000, 1)
        assert np.all(np.abs(np.diag(mom.covariance) - k.var) <= 3 * np.diag(mom.covariance_se))

    def test_square_integral_envelope(self):
        ratios = []
        for h in (0.1, 0.2, 0.4):
            k = transported(MIX, h)
            mom = kernel_moments(k, np.array([0.2, 0.1]), 3000, 2)
            half = 6 * np.sqrt(np.diag(mom.covariance))
            g = make_grid(EvaluationRegion(mom.mean - half, mom.mean + half, 150))
            ratios.append(kernel_square_integral(k, [0.2, 0.1], g) / np.sqrt(np.linalg.det(mom.precision)))
        assert max(ratios) / min(ratios) < 2.0
        assert max(ratios) <= 1.5 * (4 * math.pi) ** -1

    def test_min_count(self):
        with pytest.raises(ConfigError):
            kernel_moments(IsotropicKernel(0.1, 1), [0.0], 50, 0)


class TestLocalPCA:
    def test_covariance_mapping_against_affine_flow(self):
        C = np.array([[1.5, 0.5], [0.5, 0.6]])
        k = transported(GaussianMixtureLaw.gaussian([0.0, 0.0], C), 0.4)
        M, _ = k.affine_map()
        Minv = np.linalg.inv(M)
        exact = k.var * Minv @ Minv.T
        np.testing.assert_allclose(transported_gaussian_cov(C, SPEC, 0.4), exact, rtol=1e-10)

    def test_thin_direction_saturates(self):
        C = np.diag([1.0, 1e-4])
        cov = transported_gaussian_cov(C, SPEC, 0.5)
        assert cov[1, 1] <= 1e-4
        assert cov[0, 0] == pytest.approx(0.25, rel=0.2)

    def test_closed_form_average(self):
        sample = np.random.default_rng(0).normal(size=(500, 2)) * [1.0, 0.3]
        k = LocalPCAKernel(sample, 0.3, 50)
        pts = np.array([[0.0, 0.0], [0.5, 0.1]])
        mean, cov = np.zeros(2), np.diag([1.0, 0.09])
        u = np.random.default_rng(1).multivariate_normal(mean, cov, size=40000)
        vals = k.evaluate(pts, u)
        se = vals.std(axis=0) / np.sqrt(u.shape[0])
        assert np.all(np.abs(k.gaussian_average(pts, mean[None], cov)[0] - vals.mean(axis=0)) <= 4 * se)

    def test_data_anchor_is_density(self):
        sample = np.random.default_rng(0).normal(size=(300, 2))
        k = LocalPCAKernel(sample, 0.3, 30, anchor="data")
        g = make_grid(EvaluationRegion([-2, -2], [2, 2], 150))
        assert g.weights @ k.evaluate(g.points, np.zeros((1, 2)))[0] == pytest.approx(1.0, abs=1e-3)
        with pytest.raises(OracleUnavailableError):
            k.gaussian_average(g.points[:2], np.zeros((1, 2)), np.eye(2))


class TestPeakiness:
    def test_closed_form_slopes(self):
        samples = np.random.default_rng(0).normal(size=(40, 2))
        g = make_grid(EvaluationRegion([-4, -4], [4, 4], 160))
        hs = [0.05, 0.1, 0.2, 0.4]
        aniso = peakiness(lambda h: GaussianKernel(np.diag([h * h, 1.0]), h), hs, samples, g)
        iso = peakiness(lambda h: IsotropicKernel(h, 2), hs, samples, g)
        assert aniso.slope == pytest.approx(1.0, abs=0.1)
        assert iso.slope == pytest.approx(2.0, abs=0.1)
        # interior samples: H is close to the closed-form square integral
        assert aniso.H[0] == pytest.approx(1 / (4 * math.pi * 0.05), rel=0.1)

    def test_subregion_is_smaller(self):
        samples = np.random.default_rng(1).normal(size=(30, 2))
        full = make_grid(EvaluationRegion([-3, -3], [3, 3], 60))
        sub = make_grid(EvaluationRegion([-1, -1], [1, 1], 20))
        fn = lambda h: IsotropicKernel(h, 2)
        assert np.all(peakiness(fn, [0.2, 0.4], samples, sub).H <= peakiness(fn, [0.2, 0.4], samples, full).H)

    def test_score_peakiness(self):
        samples = np.random.default_rng(1).normal(size=(10, 1))
        g = make_grid(EvaluationRegion([-4], [4], 400))
        rep = peakiness(lambda h: IsotropicKernel(h, 1), [0.1, 0.2, 0.4], samples, g, include_score=True)
        assert np.all(rep.Hs > rep.H)
        assert rep.slope_s == pytest.approx(3.0, abs=0.3)

    def test_needs_two_scales(self):
        g = make_grid(EvaluationRegion([-1], [1], 10))
        with pytest.raises(InsufficientScalesError):
            peakiness(lambda h: IsotropicKernel(h, 1), [0.1, 0.1], np.zeros((3, 1)), g)

    @given(st.floats(0.05, 0.5), st.floats(0.3, 2.0))
    @settings(max_examples=20, deadline=None)
    def test_square_integral_formula(self, h, s):
        cov = np.diag([h * h, s])
        assert gaussian_square_integral(cov) == pytest.approx(1 / (4 * math.pi * h * math.sqrt(s)), rel=1e-12)
