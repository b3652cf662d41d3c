import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosmooth.core import EvaluationRegion, ObservationBatch, grid_from_points, make_crossfit_plan, make_grid
from geosmooth.errors import ConfigError, ContaminationError, EmptyArmError, WiringError
from geosmooth.estimators import (TestField, ZeroField, default_test_class, dis_estimate, dss_estimate,
                                  plugin_estimate, reference_proxy, stein_estimate, stein_population,
                                  treated_only_stein)
from geosmooth.kernels import IsotropicKernel
from geosmooth.nuisance import CrossFitNuisance, fit_localized_regressions, oracle_nuisance
from geosmooth.synthlab import generate, make_preset, population_density, population_gradient


def _trivial_nuisance(batch, kernel, grid, with_grad=False):
    """pi = 1 and zero regressions: the one-step estimator reduces to a kernel average."""
    G, d = grid.size, grid.dim
    kappa = kernel.evaluate(grid.points, batch.y)
    grad = kernel.gradient(grid.points, batch.y) if with_grad else None
    return CrossFitNuisance(arm=1, plan=None, kernel=kernel, grid=grid, pi_hat=np.ones(batch.n),
                            mu_hat=np.zeros((batch.n, G)),
                            nu_hat=np.zeros((batch.n, G, d)) if with_grad else None,
                            kappa=kappa, kappa_grad=grad, source="test", n=batch.n)


def _all_treated(n=200, d=1, seed=0):
    rng = np.random.default_rng(seed)
    return ObservationBatch(rng.normal(size=(n, 1)), np.ones(n, int), rng.normal(size=(n, d)))


class TestDIS:
    def test_all_treated_is_kernel_average(self):
        b = _all_treated()
        kern = IsotropicKernel(0.3, 1)
        grid = make_grid(EvaluationRegion([-2], [2], 9))
        est = dis_estimate(b, 1, _trivial_nuisance(b, kern, grid), kern, grid)
        np.testing.assert_allclose(est.values, kern.evaluate(grid.points, b.y).mean(axis=0), rtol=1e-13)
        assert est.se.shape == (9,)

    def test_oracle_within_three_se(self):
        dgp = make_preset("gauss1d")
        b = generate(dgp, 4000, 0)
        kern = IsotropicKernel(0.3, 1)
        grid = make_grid(EvaluationRegion([-1.5], [1.5], 7))
        est = dis_estimate(b, 1, oracle_nuisance(dgp, b, 1, kern, grid), kern, grid)
        truth = population_density(dgp, 1, kern, grid)
        assert np.all(np.abs(est.values - truth) <= 3 * est.se)

    def test_fitted_nuisance_close_to_truth(self):
        dgp = make_preset("gauss1d")
        b = generate(dgp, 4000, 1)
        kern = IsotropicKernel(0.3, 1)
        grid = make_grid(EvaluationRegion([-1.5], [1.5], 7))
        nz = fit_localized_regressions(b, 1, make_crossfit_plan(b.n, 5, 0), kern, grid)
        est = dis_estimate(b, 1, nz, kern, grid)
        truth = population_density(dgp, 1, kern, grid)
        assert np.max(np.abs(est.values - truth)) <= 4 * est.se.max()

    def test_wiring_errors(self):
        b = _all_treated()
        kern = IsotropicKernel(0.3, 1)
        grid = make_grid(EvaluationRegion([-2], [2], 5))
        nz = _trivial_nuisance(b, kern, grid)
        with pytest.raises(WiringError, match="kernel"):
            dis_estimate(b, 1, nz, IsotropicKernel(0.3, 1), grid)
        with pytest.raises(WiringError, match="grid"):
            dis_estimate(b, 1, nz, kern, make_grid(EvaluationRegion([-2], [2], 5)))
        with pytest.raises(WiringError, match="arm"):
            dis_estimate(b, 0, nz, kern, grid)
        with pytest.raises(WiringError, match="units"):
            dis_estimate(_all_treated(n=50), 1, nz, kern, grid)

    def test_csv(self, tmp_path):
        b = _all_treated()
        kern = IsotropicKernel(0.3, 1)
        grid = make_grid(EvaluationRegion([-2], [2], 5))
        est = dis_estimate(b, 1, _trivial_nuisance(b, kern, grid), kern, grid)
        est.to_csv(tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "y0,value,sigma2,flags" and len(lines) == 6


class TestPlugin:
    def test_uniform_weights_agree(self):
        b = generate(make_preset("gauss1d"), 500, 0)
        kern = IsotropicKernel(0.3, 1)
        grid = make_grid(EvaluationRegion([-2], [2], 9))
        free = plugin_estimate(b, 1, None, kern, grid)
        ipw = plugin_estimate(b, 1, np.full(b.n, 0.37), kern, grid, mode="ipw")
        np.testing.assert_allclose(ipw.values, free.values, rtol=1e-12)

    def test_errors(self):
        b = _all_treated()
        kern = IsotropicKernel(0.3, 1)
        grid = grid_from_points([[0.0]])
        with pytest.raises(ConfigError):
            plugin_estimate(b, 1, None, kern, grid, mode="aipw")
        with pytest.raises(ConfigError):
            plugin_estimate(b, 1, None, kern, grid, mode="ipw")
        with pytest.raises(EmptyArmError):
            plugin_estimate(b, 0, None, kern, grid)

    def test_reference_contamination(self):
        b = generate(make_preset("gauss1d"), 100, 0)
        kern = IsotropicKernel(0.3, 1)
        grid = grid_from_points([[0.0]])
        with pytest.raises(ContaminationError):
            reference_proxy(b, 1, None, kern, grid, working=b)
        fresh = generate(make_preset("gauss1d"), 100, 1)
        other = ObservationBatch(fresh.x, fresh.a, fresh.y, ids=np.arange(100, 200))
        assert reference_proxy(other, 1, None, kern, grid, working=b).method == "reference-proxy"


class TestDSS:
    def test_all_treated_ratio(self):
        b = _all_treated(d=2)
        kern = IsotropicKernel(0.5, 2)
        grid = make_grid(EvaluationRegion([-1, -1], [1, 1], 3))
        est = dss_estimate(b, 1, _trivial_nuisance(b, kern, grid, with_grad=True), kern, grid)
        P = kern.evaluate(grid.points, b.y).mean(axis=0)
        G = kern.gradient(grid.points, b.y).mean(axis=0)
        np.testing.assert_allclose(est.values, G / P[:, None], rtol=1e-12)
        assert est.sigma2_coord.shape == (9, 2)
        np.testing.assert_allclose(est.sigma2, est.sigma2_coord.sum(axis=1))

    def test_floor_truncation(self):
        b = _all_treated(d=1)
        kern = IsotropicKernel(0.2, 1)
        grid = grid_from_points([[0.0], [8.0]])
        est = dss_estimate(b, 1, _trivial_nuisance(b, kern, grid, with_grad=True), kern, grid, floor=1e-3)
        np.testing.assert_array_equal(est.flags["truncated"], [False, True])
        assert est.diagnostics["truncation_count"] == 1
        assert est.point_flags() == ["", "truncated"]

    def test_requires_gradient_nuisance(self):
        b = _all_treated()
        kern = IsotropicKernel(0.3, 1)
        grid = grid_from_points([[0.0]])
        with pytest.raises(ConfigError, match="with_grad"):
            dss_estimate(b, 1, _trivial_nuisance(b, kern, grid), kern, grid)

    def test_bad_floor(self):
        b = _all_treated()
        kern = IsotropicKernel(0.3, 1)
        grid = grid_from_points([[0.0]])
        with pytest.raises(ConfigError):
            dss_estimate(b, 1, _trivial_nuisance(b, kern, grid, True), kern, grid, floor=0.0)


class TestStein:
    def test_default_class(self):
        fields = default_test_class(2)
        assert len(fields) == 6
        assert [f.name for f in fields[:2]] == ["e0", "e1"]
        again = default_test_class(2)
        np.testing.assert_array_equal(fields[3].direction, again[3].direction)

    def test_field_divergence_matches_fd(self):
        f = TestField("t", np.array([0.3, -0.8]), np.array([0.2, 0.1]), 0.7)
        y = np.random.default_rng(0).normal(size=(20, 2))
        step = 1e-6
        fd = sum((f.value(y + step * e)[:, j] - f.value(y - step * e)[:, j]) / (2 * step)
                 for j, e in enumerate(np.eye(2)))
        np.testing.assert_allclose(f.divergence(y), fd, atol=1e-8)

    def test_zero_field(self):
        b = generate(make_preset("gauss2d"), 300, 0)
        kern = IsotropicKernel(0.5, 2)
        grid = make_grid(EvaluationRegion([-3, -3], [3, 3], 10))
        nz = oracle_nuisance(make_preset("gauss2d"), b, 1, kern, grid, with_grad=True)
        (est,) = stein_estimate(b, 1, nz, kern, grid, [ZeroField()])
        assert est.value == 0.0 and est.sigma2 == 0.0

    def test_population_value_vanishes(self):
        # integration by parts: int div(g) p + g . grad p = 0 for a decaying field
        dgp = make_preset("gauss2d")
        kern = IsotropicKernel(0.4, 2)
        grid = make_grid(EvaluationRegion([-7, -7], [7, 7], 80))
        P = population_density(dgp, 1, kern, grid)
        G = population_gradient(dgp, 1, kern, grid)
        vals = stein_population(P, G, grid, default_test_class(2))
        np.testing.assert_allclose(vals, 0.0, atol=1e-6)

    def test_treated_only_matches_one_step_when_all_treated(self):
        b = _all_treated(d=2)
        kern = IsotropicKernel(0.5, 2)
        grid = make_grid(EvaluationRegion([-3, -3], [3, 3], 8))
        fields = default_test_class(2, n_random=1)
        one = stein_estimate(b, 1, _trivial_nuisance(b, kern, grid, True), kern, grid, fields)
        raw = treated_only_stein(b, 1, kern, grid, fields)
        np.testing.assert_allclose([e.value for e in one], [e.value for e in raw], rtol=1e-12)

    @given(st.floats(0.1, 3.0))
    @settings(max_examples=10, deadline=None)
    def test_linear_in_field(self, c):
        b = _all_treated(n=100, d=2)
        kern = IsotropicKernel(0.5, 2)
        grid = make_grid(EvaluationRegion([-3, -3], [3, 3], 6))
        nz = _trivial_nuisance(b, kern, grid, True)
        base = TestField("a", np.array([1.0, 0.0]), np.zeros(2))
        scaled = TestField("b", np.array([c, 0.0]), np.zeros(2))
        e1, e2 = stein_estimate(b, 1, nz, kern, grid, [base, scaled])
        assert e2.value == pytest.approx(c * e1.value, rel=1e-10, abs=1e-14)
