import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosmooth.core import EvaluationRegion, ObservationBatch, grid_from_points, make_crossfit_plan, make_grid
from geosmooth.errors import ConfigError, DegenerateFoldError, SingularityError
from geosmooth.kernels import IsotropicKernel
from geosmooth.nuisance import (feature_map, fit_localized_regressions, fit_logistic, fit_propensity,
                                oracle_nuisance, perturb_nuisance, ridge_fit)
from geosmooth.synthlab import generate, make_preset


def _logit_batch(n, slope, seed, d_y=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1))
    a = (rng.random(n) < 1 / (1 + np.exp(-slope * x[:, 0]))).astype(int)
    return ObservationBatch(x, a, rng.normal(size=(n, d_y)))


class TestPropensity:
    def test_coin_flip(self):
        b = _logit_batch(2000, 0.0, 0)
        fit = fit_propensity(b, 1, make_crossfit_plan(b.n, 5, 0))
        for m in fit.models:
            assert abs(m.coef[1]) < 0.15 and abs(m.coef[0]) < 0.15
        assert np.all(np.abs(fit.pi_hat - 0.5) <= 0.05)

    def test_recovers_slope(self):
        b = _logit_batch(10_000, 1.0, 1)
        coef, ok, _ = fit_logistic(b.x, (b.a == 1).astype(float))
        assert ok and abs(coef[1] - 1.0) < 0.1

    def test_clip_floor(self):
        b = _logit_batch(1000, 4.0, 2)
        fit = fit_propensity(b, 1, make_crossfit_plan(b.n, 5, 0), clip=0.1)
        assert fit.pi_hat.min() >= 0.1 and fit.clip_count > 0

    def test_no_clip_in_open_interval(self):
        b = _logit_batch(1000, 1.0, 3)
        fit = fit_propensity(b, 1, make_crossfit_plan(b.n, 5, 0), clip=0.0)
        assert np.all((fit.pi_hat > 0) & (fit.pi_hat < 1))

    def test_single_arm_fold(self):
        b = ObservationBatch(np.random.default_rng(0).normal(size=(20, 1)), np.ones(20, int), np.zeros((20, 1)))
        with pytest.raises(DegenerateFoldError):
            fit_propensity(b, 1, make_crossfit_plan(20, 2, 0))

    def test_non_convergence_warns(self):
        x = np.linspace(-1, 1, 40)[:, None]
        b = ObservationBatch(x, (x[:, 0] > 0).astype(int), np.zeros((40, 1)))
        with pytest.warns(RuntimeWarning, match="did not converge"):
            fit_propensity(b, 1, make_crossfit_plan(40, 2, 0), max_iter=3)


class TestRidge:
    def test_exact_linear_fit(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 2))
        y = np.column_stack([1.0 + x @ [2.0, -1.0], -0.5 + x @ [0.3, 0.0]])
        b0, b = ridge_fit(x, y, 0.0)
        np.testing.assert_allclose(b0, [1.0, -0.5], atol=1e-12)
        np.testing.assert_allclose(b, [[2.0, 0.3], [-1.0, 0.0]], atol=1e-12)

    def test_infinite_ridge_gives_mean(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(30, 2)), rng.normal(size=(30, 3))
        b0, b = ridge_fit(x, y, 1e12)
        np.testing.assert_allclose(b, 0.0, atol=1e-9)
        np.testing.assert_allclose(b0, y.mean(axis=0), atol=1e-9)

    def test_singular_at_zero_ridge(self):
        x = np.ones((10, 2))
        with pytest.raises(SingularityError, match="ridge > 0"):
            ridge_fit(x, np.zeros((10, 1)), 0.0)

    def test_feature_maps(self):
        assert feature_map("quadratic")(np.ones((4, 2))).shape == (4, 5)
        with pytest.raises(ConfigError):
            feature_map("cubic")


class TestLocalizedRegressions:
    def test_no_signal(self):
        rng = np.random.default_rng(0)
        n = 3000
        b = ObservationBatch(rng.normal(size=(n, 2)), rng.integers(0, 2, n), rng.normal(size=(n, 1)))
        grid = make_grid(EvaluationRegion([-1], [1], 5))
        kern = IsotropicKernel(0.5, 1)
        nz = fit_localized_regressions(b, 1, make_crossfit_plan(n, 5, 0), kern, grid)
        for _, slopes in nz.mu_coef:
            assert np.max(np.abs(slopes)) < 0.03
        vals = kern.evaluate(grid.points, b.y[b.a == 1])
        se = vals.std(axis=0) / np.sqrt(vals.shape[0])
        assert np.all(np.abs(nz.mu_hat.mean(axis=0) - vals.mean(axis=0)) <= 3 * se + 1e-3)

    def test_tracks_near_deterministic_outcome(self):
        rng = np.random.default_rng(1)
        n = 5000
        x = rng.normal(size=(n, 1))
        b = ObservationBatch(x, rng.integers(0, 2, n), x + 1e-3 * rng.normal(size=(n, 1)))
        grid = grid_from_points([[0.0]])
        kern = IsotropicKernel(1.0, 1)
        nz = fit_localized_regressions(b, 1, make_crossfit_plan(n, 5, 0), kern, grid, features="quadratic")
        # with Y = X the regression target is a known function of X; its
        # least-squares quadratic projection is what the fold models estimate
        truth = kern.evaluate(grid.points, x)[:, 0]
        projection = np.polyval(np.polyfit(x[:, 0], truth, 2), x[:, 0])
        assert np.sqrt(np.mean((nz.mu_hat[:, 0] - projection) ** 2)) < 0.005

    def test_shapes_and_separation(self):
        dgp = make_preset("gauss2d")
        b = generate(dgp, 400, 0)
        grid = make_grid(EvaluationRegion([-1, -1], [1, 1], 4))
        nz = fit_localized_regressions(b, 1, make_crossfit_plan(400, 5, 0), IsotropicKernel(0.4, 2), grid,
                                       with_grad=True)
        assert nz.mu_hat.shape == (400, 16) and nz.nu_hat.shape == (400, 16, 2)
        assert nz.check_separation()
        assert np.all(nz.kappa[b.a != 1] == 0)
        assert set(nz.to_json_dict()) >= {"propensity", "mu", "nu"}

    @given(st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=10, deadline=None)
    def test_translation_consistency(self, sx, sy):
        dgp = make_preset("gauss2d")
        b = generate(dgp, 200, 3)
        shift = np.array([sx, sy])
        grid = grid_from_points([[0.0, 0.0], [0.5, -0.3]])
        kern = IsotropicKernel(0.4, 2)
        plan = make_crossfit_plan(200, 5, 0)
        base = fit_localized_regressions(b, 1, plan, kern, grid)
        moved = fit_localized_regressions(ObservationBatch(b.x, b.a, b.y + shift), 1, plan, kern,
                                          grid_from_points(grid.points + shift))
        np.testing.assert_allclose(moved.mu_hat, base.mu_hat, atol=1e-10)


class TestOracle:
    def test_propensity_matches_fit(self):
        dgp = make_preset("gauss1d")
        b = generate(dgp, 10_000, 0)
        grid = grid_from_points([[0.0]])
        nz = oracle_nuisance(dgp, b, 1, IsotropicKernel(0.3, 1), grid)
        fit = fit_propensity(b, 1, make_crossfit_plan(b.n, 5, 0), clip=0.0)
        # pointwise standard error of a logistic fit with n=1e4 is below 0.02
        assert np.mean(np.abs(nz.pi_hat - fit.pi_hat)) < 3 * 0.02

    def test_closed_form_matches_monte_carlo(self):
        dgp = make_preset("gauss2d")
        b = generate(dgp, 5, 1)
        grid = grid_from_points([[0.0, 0.0], [0.5, 0.2]])
        kern = IsotropicKernel(0.4, 2)
        exact = oracle_nuisance(dgp, b, 1, kern, grid, with_grad=True)
        mc = oracle_nuisance(dgp, b, 1, kern, grid, with_grad=True, method="monte-carlo", mc_count=20000)
        assert np.all(np.abs(exact.mu_hat - mc.mu_hat) <= 4 * mc.mc_se)
        np.testing.assert_allclose(exact.nu_hat, mc.nu_hat, atol=0.02)

    def test_monte_carlo_se_scaling(self):
        dgp = make_preset("gauss1d")
        b = generate(dgp, 3, 2)
        grid = grid_from_points([[0.0]])
        kern = IsotropicKernel(0.3, 1)
        counts = [500, 2000, 8000, 32000]
        se = [oracle_nuisance(dgp, b, 1, kern, grid, method="monte-carlo", mc_count=c).mc_se.mean() for c in counts]
        slope = np.polyfit(np.log(counts), np.log(se), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.05)

    def test_perturbation(self):
        dgp = make_preset("gauss1d")
        b = generate(dgp, 50, 0)
        grid = grid_from_points([[0.0]])
        nz = oracle_nuisance(dgp, b, 1, IsotropicKernel(0.3, 1), grid)
        same = perturb_nuisance(nz, b.x, 0.0)
        np.testing.assert_array_equal(same.pi_hat, nz.pi_hat)
        moved = perturb_nuisance(nz, b.x, 0.2)
        t = np.tanh(b.x[:, 0])
        np.testing.assert_allclose(1 / moved.pi_hat, (1 / nz.pi_hat) * (1 + 0.2 * t))
        with pytest.raises(ConfigError):
            perturb_nuisance(nz, b.x, 5.0)
