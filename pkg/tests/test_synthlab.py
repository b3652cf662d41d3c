import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from geosmooth.core import EvaluationRegion, grid_from_points, make_grid
from geosmooth.errors import ConfigError, GridMismatchError, InsufficientScalesError, LogDomainError
from geosmooth.kernels import IsotropicKernel
from geosmooth.synthlab import (PRESETS, bandwidth, drift_diagnostic, generate, interior_mse, ise, loglog_fit,
                                make_preset, merge_config, parse_estimator, population_density,
                                population_gradient, positivity_audit, rate_slope, run_experiment)
from geosmooth.synthlab.experiment import EXPERIMENT_DEFAULTS, SECTION_KEYS


class TestDGP:
    @pytest.mark.parametrize("name", PRESETS)
    def test_preset_shapes(self, name):
        dgp = make_preset(name)
        b = generate(dgp, 300, 0)
        assert b.x.shape == (300, dgp.k) and b.y.shape == (300, dgp.d)
        assert set(np.unique(b.a)) <= {0, 1}
        assert dgp.counterfactual_law(1).dim == dgp.eval_dim

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            make_preset("gauss7d")

    def test_no_confounding_means_random_assignment(self):
        b = generate(make_preset("gauss1d", confounding=0.0), 20_000, 1)
        # correlation of independent variables has standard error 1/sqrt(n)
        assert abs(np.corrcoef(b.a, b.x[:, 0])[0, 1]) < 4 / np.sqrt(b.n)

    def test_confounding_induces_correlation(self):
        b = generate(make_preset("gauss1d", confounding=1.0), 20_000, 1)
        assert np.corrcoef(b.a, b.x[:, 0])[0, 1] > 0.2

    @pytest.mark.parametrize("name", PRESETS)
    def test_positivity(self, name):
        assert positivity_audit(make_preset(name), 100_000, 0) >= 0.08

    def test_generation_is_deterministic(self):
        dgp = make_preset("mix2d")
        np.testing.assert_array_equal(generate(dgp, 50, 3).y, generate(dgp, 50, 3).y)

    def test_counterfactual_moments(self):
        dgp = make_preset("mix1d")
        rng = np.random.default_rng(0)
        x = rng.standard_normal((200_000, dgp.k))
        y = dgp.sample_outcome(x, 1, rng)
        law = dgp.counterfactual_law(1)
        assert y.mean() == pytest.approx(law.mean()[0], abs=0.01)
        assert y.var() == pytest.approx(law.covariance()[0, 0], abs=0.02)


class TestOracles:
    def test_gaussian_convolution_1d(self):
        # Y(1) ~ N(0.3, 0.5 + 0.6^2 + 0.3^2); smoothing adds h^2 to the variance
        dgp, h = make_preset("gauss1d"), 0.3
        grid = make_grid(EvaluationRegion([-2], [2], 11))
        got = population_density(dgp, 1, IsotropicKernel(h, 1), grid)
        expected = norm.pdf(grid.points[:, 0], 0.3, np.sqrt(0.5 + 0.36 + 0.09 + h**2))
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_gaussian_convolution_2d_gradient(self):
        dgp, h = make_preset("gauss2d"), 0.4
        grid = make_grid(EvaluationRegion([-1, -1], [1, 1], 4))
        L = np.array([[0.6, 0.2, 0.0], [0.3, 0.0, 0.3]])
        cov = np.array([[0.5, 0.1], [0.1, 0.4]]) + L @ L.T + h**2 * np.eye(2)
        mean = np.array([0.2, -0.1])
        dens = multivariate_normal(mean, cov).pdf(grid.points)
        grad = -dens[:, None] * np.linalg.solve(cov, (grid.points - mean).T).T
        kern = IsotropicKernel(h, 2)
        np.testing.assert_allclose(population_density(dgp, 1, kern, grid), dens, rtol=1e-12)
        np.testing.assert_allclose(population_gradient(dgp, 1, kern, grid), grad, rtol=1e-10, atol=1e-14)

    def test_ise_constant_offset(self):
        grid = make_grid(EvaluationRegion([-1, -1], [2, 1], 7))
        target = np.random.default_rng(0).normal(size=grid.size)
        assert ise(target + 0.3, target, grid) == pytest.approx(0.09 * 6.0, rel=1e-12)

    def test_ise_grid_mismatch(self):
        grid = make_grid(EvaluationRegion([0], [1], 5))
        with pytest.raises(GridMismatchError):
            ise(np.zeros(4), np.zeros(4), grid)

    def test_interior_mse(self):
        grid = make_grid(EvaluationRegion([0], [1], 10))
        assert interior_mse(np.full(10, 2.0), np.zeros(10), grid) == pytest.approx(4.0)

    @given(st.floats(-2.0, 0.0), st.floats(-3.0, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_rate_slope_exact_power_law(self, slope, log_c):
        n = np.array([100, 200, 400, 800, 1600])
        curve = rate_slope(n, np.exp(log_c) * n**slope)
        assert curve.slope == pytest.approx(slope, abs=1e-10)
        assert curve.intercept == pytest.approx(log_c, abs=1e-8)
        assert curve.slope_se < 1e-8

    def test_rate_slope_errors(self):
        with pytest.raises(InsufficientScalesError):
            rate_slope([1, 2], [1.0, 0.5])
        with pytest.raises(ConfigError):
            rate_slope([1, 3, 2], [1.0, 0.5, 0.2])
        with pytest.raises(LogDomainError):
            rate_slope([1, 2, 3], [1.0, 0.0, 0.2])
        with pytest.raises(InsufficientScalesError):
            loglog_fit([1, 1], [1, 2])

    def test_drift_zero_eps(self):
        u = np.random.default_rng(0).normal(size=(100, 1))
        grid = make_grid(EvaluationRegion([-2], [2], 5))
        table = drift_diagnostic(lambda h: IsotropicKernel(h, 1), lambda h, e: IsotropicKernel(h * (1 + e), 1),
                                 u, grid, [0.2, 0.4], [0.0, 0.1, 0.2])
        np.testing.assert_array_equal(table.sup_drift[:, 0], 0.0)
        assert np.all(table.sup_drift[:, 1:] > 0)
        assert np.isfinite(table.eps_slope) and np.isfinite(table.h_slope)


class TestConfig:
    def test_bandwidth_rule(self):
        assert bandwidth({"fixed": 0.3}, 1000) == 0.3
        assert bandwidth({"c": 2.0, "exponent": -0.5}, 100) == pytest.approx(0.2)

    def test_parse_estimator(self):
        assert parse_estimator("dis-geo") == ("dis", "geo")
        assert parse_estimator("stein-treated-iso") == ("stein-treated", "iso")
        with pytest.raises(ConfigError):
            parse_estimator("dis-cubic")

    def test_merge_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            merge_config(EXPERIMENT_DEFAULTS, {"n_lsit": [1]}, SECTION_KEYS)
        assert info.value.key == "n_lsit"
        with pytest.raises(ConfigError) as info:
            merge_config(EXPERIMENT_DEFAULTS, {"band": {"BB": 3}}, SECTION_KEYS)
        assert info.value.key == "band.BB"

    def test_merge_nested_overlay(self):
        cfg = merge_config(EXPERIMENT_DEFAULTS, {"band": {"B": 7}}, SECTION_KEYS)
        assert cfg["band"]["B"] == 7 and cfg["band"]["alpha"] == 0.05
        assert EXPERIMENT_DEFAULTS["band"]["B"] == 200
        fixed = merge_config(EXPERIMENT_DEFAULTS, {"bandwidth": {"fixed": 0.3}}, SECTION_KEYS)
        assert fixed["bandwidth"] == {"fixed": 0.3}

    def test_experiment_rejects_bad_n_list(self):
        with pytest.raises(ConfigError) as info:
            run_experiment({"n_list": [500, 500, 1000]})
        assert info.value.key == "n_list"

    def test_experiment_rejects_zero_replications(self):
        with pytest.raises(ConfigError):
            run_experiment({"replications": 0})

    def test_tiny_experiment(self, tmp_path):
        cfg = {"preset": "gauss1d", "n_list": [200, 400, 800], "replications": 2, "estimators": ["dis-iso"],
               "grid_points_per_axis": 12, "geometry_size": 0, "region_pilot_size": 1000,
               "band": {"n": 400, "replications": 2, "B": 50},
               "peakiness": {"kernels": ["iso"], "samples": 20, "h": [0.2, 0.3, 0.4]},
               "drift": {"samples": 200, "h": [0.2, 0.4], "eps": [0.05, 0.1]}}
        result = run_experiment(cfg, tmp_path)
        for name in result.files:
            assert (tmp_path / name).exists()
        assert "curves.csv" in result.files and "manifest.json" in result.files
        assert len(result.bands) == 2
