"""Penalized Poisson-form likelihood: Newton solver, Laplace marginal, selection."""

import dataclasses
import math

import numpy as np
import pytest
from scipy import integrate

from whsmooth.duration import aggregate_1d, crude_rates
from whsmooth.errors import (
    ConvergenceError,
    DataInconsistencyError,
    InvalidParameterError,
)
from whsmooth.gaussian import fit_gaussian, select_lambda_norm
from whsmooth.generalized import (
    delta_lambda,
    delta_theta,
    initial_theta,
    laplace_marginal_loglik,
    loglik_gradient,
    marginal_loglik_at_infinity,
    newton_fit,
    newton_step,
    penalized_loglik,
    select_lambda_outer,
    select_lambda_performance,
    theta_infinity,
)
from whsmooth.optimize import SearchConfig
from whsmooth.penalty import penalty_1d, penalty_2d
from whsmooth.simulator import HazardLaw, SimConfig, simulate


def _simulated_aggregates(seed, m=20_000, window=(45, 84)):
    # the default curved law bends around age 54: selection stays interior
    cfg = SimConfig(m=m, seed=seed, x_window=window,
                    entry_x=(window[0], window[1] - 4.0), censoring=(1.0, 6.0))
    pf = simulate(cfg, HazardLaw.makeham())
    return aggregate_1d(pf, *window)


class TestPenalizedLoglik:
    def test_zero_theta(self):
        d = np.array([1.0, 2.0, 0.0])
        ec = np.array([3.0, 1.0, 2.0])
        got = penalized_loglik(np.zeros(3), d, ec, penalty_1d(3, 1, 5.0))
        assert got == pytest.approx(-ec.sum(), rel=1e-12)

    def test_single_cell_crude_rate_is_maximum(self):
        d, ec = np.array([1.0]), np.array([1.0])
        at_zero = penalized_loglik([0.0], d, ec, None)
        assert at_zero == pytest.approx(-1.0)
        assert penalized_loglik([0.3], d, ec, None) < at_zero
        assert penalized_loglik([-0.3], d, ec, None) < at_zero

    def test_events_without_exposure_rejected(self):
        with pytest.raises(DataInconsistencyError):
            penalized_loglik([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], penalty_1d(2, 1, 1.0))

    def test_zero_exposure_cells_contribute_nothing(self):
        op = penalty_1d(3, 1, 0.0)
        base = penalized_loglik([0.1, -0.2, 5.0], [2.0, 1.0, 0.0], [4.0, 2.0, 0.0], op)
        other = penalized_loglik([0.1, -0.2, -7.0], [2.0, 1.0, 0.0], [4.0, 2.0, 0.0], op)
        assert base == pytest.approx(other, rel=1e-12)

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(0)
        n = 7
        d = rng.uniform(0.5, 30.0, n)
        ec = rng.uniform(1.0, 50.0, n)
        op = penalty_1d(n, 2, 3.0)
        for _ in range(5):
            theta = rng.normal(-1.0, 0.7, n)
            grad = loglik_gradient(theta, d, ec, op)
            h = 1e-6
            for i in range(n):
                e = np.zeros(n)
                e[i] = h
                fd = (penalized_loglik(theta + e, d, ec, op)
                      - penalized_loglik(theta - e, d, ec, op)) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-6, abs=1e-7)

    def test_hessian_matches_gradient_differences(self):
        rng = np.random.default_rng(1)
        n = 5
        d = rng.uniform(1.0, 20.0, n)
        ec = rng.uniform(2.0, 30.0, n)
        op = penalty_1d(n, 1, 2.0)
        theta = rng.normal(-0.5, 0.5, n)
        hess = -(np.diag(np.exp(theta) * ec) + op.matrix)
        h = 1e-6
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd = (loglik_gradient(theta + e, d, ec, op)
                  - loglik_gradient(theta - e, d, ec, op)) / (2 * h)
            np.testing.assert_allclose(hess[:, i], fd, rtol=1e-4, atol=1e-5)


class TestNewtonFit:
    def test_zero_lambda_recovers_crude_rates(self):
        d = np.array([5.0, 3.0, 8.0, 2.0])
        ec = np.array([10.0, 9.0, 20.0, 6.0])
        fit = newton_fit(d, ec, penalty_1d(4, 1, 0.0))
        np.testing.assert_allclose(fit.theta_hat, np.log(d / ec), atol=1e-10)

    def test_exact_log_linear_data_is_fixed_point(self):
        n = 15
        x = np.arange(n, dtype=float)
        a, b = -3.0, 0.08
        ec = np.linspace(40.0, 80.0, n)
        d = np.exp(a + b * x) * ec
        fit = newton_fit(d, ec, penalty_1d(n, 2, 25.0))
        np.testing.assert_allclose(fit.theta_hat, a + b * x, atol=1e-6)

    def test_first_iterate_equals_classical_smoothing(self):
        agg = _simulated_aggregates(seed=11)
        assert np.all(agg.d > 0)
        op = penalty_1d(agg.n, 2, 100.0)
        theta0 = np.log(agg.d / agg.ec)
        one_step = newton_step(theta0, agg.d, agg.ec, op)
        classical = fit_gaussian(theta0, agg.d, op)
        np.testing.assert_allclose(one_step, classical.theta_hat, atol=1e-10)

    def test_trace_is_nondecreasing(self):
        for seed in range(4):
            agg = _simulated_aggregates(seed=seed, m=4000)
            fit = newton_fit(agg.d, agg.ec, penalty_1d(agg.n, 2, 50.0))
            trace = np.array(fit.trace)
            assert np.all(np.diff(trace) >= -1e-12)

    def test_gradient_small_at_convergence(self):
        agg = _simulated_aggregates(seed=5, m=8000)
        op = penalty_1d(agg.n, 2, 30.0)
        fit = newton_fit(agg.d, agg.ec, op)
        grad = loglik_gradient(fit.theta_hat, agg.d, agg.ec, op)
        tol_g = 1e-6 * max(1.0, np.max(np.abs(agg.d)))
        assert np.max(np.abs(grad)) <= tol_g

    def test_nonconvergence_carries_trace(self):
        agg = _simulated_aggregates(seed=6, m=4000)
        with pytest.raises(ConvergenceError) as err:
            newton_fit(agg.d, agg.ec, penalty_1d(agg.n, 2, 10.0), max_iter=1, eps_l=1e-300)
        assert len(err.value.trace) >= 2

    def test_converges_with_zero_event_cells(self):
        # damped start handles d = 0; the fit stays finite
        d = np.array([0.0, 2.0, 0.0, 5.0, 1.0, 0.0])
        ec = np.array([4.0, 6.0, 3.0, 9.0, 5.0, 2.0])
        fit = newton_fit(d, ec, penalty_1d(6, 2, 2.0))
        assert np.all(np.isfinite(fit.theta_hat))
        assert fit.converged


class TestLaplaceMarginal:
    def test_quadrature_oracle_two_cells(self):
        # exact marginal by 2D quadrature of likelihood times prior
        d = np.array([40.0, 60.0])
        ec = np.array([90.0, 110.0])
        lam = 2.0
        op = penalty_1d(2, 1, lam)
        fit = newton_fit(d, ec, op)
        got = laplace_marginal_loglik(fit)

        anchor = fit.penalized_loglik

        def integrand(t2, t1):
            th = np.array([t1, t2])
            lp = penalized_loglik(th, d, ec, op)
            return math.exp(lp - anchor)

        c1, c2 = np.log(d / ec)
        span = 1.5
        val, abserr = integrate.dblquad(integrand, c1 - span, c1 + span,
                                        c2 - span, c2 + span,
                                        epsabs=1e-12, epsrel=1e-10)
        oracle = anchor + math.log(val) + 0.5 * math.log(2 * lam / (2 * math.pi))
        assert got == pytest.approx(oracle, rel=1e-3)
        # Laplace error is genuinely small but nonzero here
        assert abs(got - oracle) > 1e-9

    def test_requires_converged_fit(self):
        d = np.array([4.0, 6.0])
        ec = np.array([9.0, 11.0])
        fit = newton_fit(d, ec, penalty_1d(2, 1, 1.0))
        broken = dataclasses.replace(fit, converged=False)
        with pytest.raises(InvalidParameterError):
            laplace_marginal_loglik(broken)

    def test_continuous_in_lambda_on_grid(self):
        agg = _simulated_aggregates(seed=7, m=6000)
        template = penalty_1d(agg.n, 2, 1.0)
        us = np.arange(1.0, 2.51, 0.01)
        mls = np.array([
            laplace_marginal_loglik(newton_fit(agg.d, agg.ec, template.with_lambdas(10.0**u)))
            for u in us
        ])
        assert np.all(np.isfinite(mls))
        # second differences at step 0.01 stay at curvature scale: no jumps
        assert np.max(np.abs(np.diff(mls, 2))) < 1e-3


class TestSelectLambdaOuter:
    def test_warm_and_cold_starts_agree(self):
        agg = _simulated_aggregates(seed=8)
        template = penalty_1d(agg.n, 2, 1.0)
        lam_cold, _ = select_lambda_outer(agg.d, agg.ec, template, warm_start=False)
        lam_warm, _ = select_lambda_outer(agg.d, agg.ec, template, warm_start=True)
        assert abs(math.log10(lam_cold[0]) - math.log10(lam_warm[0])) < 1e-2

    def test_log_linear_law_pushes_lambda_high(self):
        n = 20
        x = np.arange(n, dtype=float)
        ec = np.full(n, 5000.0)
        d = np.exp(-4.0 + 0.06 * x) * ec
        lams, fit = select_lambda_outer(d, ec, penalty_1d(n, 2, 1.0))
        assert math.log10(lams[0]) > 6.0
        np.testing.assert_allclose(fit.theta_hat, -4.0 + 0.06 * x, atol=1e-5)


class TestSelectLambdaPerformance:
    def test_first_selection_matches_classical_rule(self):
        agg = _simulated_aggregates(seed=9)
        assert np.all(agg.d > 0)
        template = penalty_1d(agg.n, 2, 1.0)
        # a huge gain threshold stops the loop after its first iteration,
        # exposing lambda_0
        lam0, _ = select_lambda_performance(agg.d, agg.ec, template, eps_l=1e10)
        theta_c, _ = crude_rates(agg)
        cfg = SearchConfig(ftol=1e-8 * float(agg.d.sum()))
        lam_ref, _ = select_lambda_norm(theta_c, agg.d.astype(float), template, cfg)
        assert abs(math.log10(lam0[0]) - math.log10(lam_ref[0])) < 1e-2

    def test_close_to_outer_on_data_rich_portfolio(self):
        agg = _simulated_aggregates(seed=10, m=30_000)
        template = penalty_1d(agg.n, 2, 1.0)
        outer = select_lambda_outer(agg.d, agg.ec, template)
        lam_perf, _ = select_lambda_performance(agg.d, agg.ec, template)
        dl = delta_lambda(lam_perf, agg.d, agg.ec, template, outer=outer)
        assert dl < 0.01

    def test_2d_symmetry(self):
        rng = np.random.default_rng(12)
        n = 8
        x = np.arange(n, dtype=float)
        log_mu = -2.0 + 0.05 * x[:, None] + 0.5 * np.exp(-0.5 * x[None, :])
        ec = np.full((n, n), 400.0)
        d = rng.poisson(np.exp(log_mu) * ec).astype(float)
        template = penalty_2d(n, n, 2, 2, 1.0, 1.0)
        lams_a, _ = select_lambda_performance(d.reshape(-1, order="F"), ec.reshape(-1, order="F"), template)
        lams_b, _ = select_lambda_performance(d.T.reshape(-1, order="F"), ec.T.reshape(-1, order="F"), template)
        assert abs(math.log10(lams_a[0]) - math.log10(lams_b[1])) < 0.1
        assert abs(math.log10(lams_a[1]) - math.log10(lams_b[0])) < 0.1


class TestThetaInfinity:
    def test_order_one_gives_global_constant(self):
        d = np.array([3.0, 7.0, 2.0, 8.0])
        ec = np.array([10.0, 12.0, 9.0, 21.0])
        theta = theta_infinity(d, ec, penalty_1d(4, 1, 1.0))
        expected = math.log(d.sum() / ec.sum())
        np.testing.assert_allclose(theta, np.full(4, expected), atol=1e-8)

    def test_recovers_exact_log_linear_law(self):
        n = 12
        x = np.arange(n, dtype=float)
        ec = np.linspace(30.0, 90.0, n)
        d = np.exp(-2.5 + 0.07 * x) * ec
        theta = theta_infinity(d, ec, penalty_1d(n, 2, 1.0))
        np.testing.assert_allclose(theta, -2.5 + 0.07 * x, atol=1e-6)

    def test_matches_huge_lambda_newton_fit(self):
        agg = _simulated_aggregates(seed=13, m=5000)
        template = penalty_1d(agg.n, 2, 1.0)
        theta_inf = theta_infinity(agg.d, agg.ec, template)
        fit = newton_fit(agg.d, agg.ec, template.with_lambdas(1e14))
        np.testing.assert_allclose(theta_inf, fit.theta_hat, atol=1e-3)


class TestDeltaMetrics:
    def test_delta_theta_endpoints(self):
        agg = _simulated_aggregates(seed=14, m=5000)
        op = penalty_1d(agg.n, 2, 40.0)
        fit = newton_fit(agg.d, agg.ec, op)
        theta_inf = theta_infinity(agg.d, agg.ec, op)
        assert delta_theta(fit.theta_hat, fit, theta_inf) == pytest.approx(0.0, abs=1e-12)
        assert delta_theta(theta_inf, fit, theta_inf) == pytest.approx(1.0, rel=1e-12)

    def test_delta_theta_degenerate_denominator_is_nan(self):
        # data exactly in the null space: the polynomial fit is already optimal
        n = 10
        x = np.arange(n, dtype=float)
        ec = np.full(n, 100.0)
        d = np.exp(-2.0 + 0.05 * x) * ec
        op = penalty_1d(n, 2, 10.0)
        fit = newton_fit(d, ec, op)
        theta_inf = theta_infinity(d, ec, op)
        assert math.isnan(delta_theta(fit.theta_hat + 0.01, fit, theta_inf))

    def test_delta_lambda_zero_at_outer_optimum(self):
        agg = _simulated_aggregates(seed=15, m=8000)
        template = penalty_1d(agg.n, 2, 1.0)
        outer = select_lambda_outer(agg.d, agg.ec, template)
        assert delta_lambda(outer[0], agg.d, agg.ec, template, outer=outer) == pytest.approx(0.0, abs=1e-9)

    def test_delta_lambda_infinity_convention_is_one(self):
        agg = _simulated_aggregates(seed=16, m=8000)
        template = penalty_1d(agg.n, 2, 1.0)
        lams, fit = select_lambda_outer(agg.d, agg.ec, template)
        ml_outer = laplace_marginal_loglik(fit)
        theta_inf = theta_infinity(agg.d, agg.ec, fit.penalty)
        ml_inf = marginal_loglik_at_infinity(agg.d, agg.ec, fit.penalty, theta_inf)
        delta_inf = (ml_outer - ml_inf) / (ml_outer - ml_inf)
        assert delta_inf == 1.0

    def test_delta_lambda_continuous_on_grid(self):
        agg = _simulated_aggregates(seed=17, m=5000)
        template = penalty_1d(agg.n, 2, 1.0)
        outer = select_lambda_outer(agg.d, agg.ec, template)
        us = np.linspace(math.log10(outer[0][0]) - 1.0, math.log10(outer[0][0]) + 1.0, 21)
        deltas = np.array([
            delta_lambda(10.0**u, agg.d, agg.ec, template, outer=outer) for u in us
        ])
        assert np.all(np.isfinite(deltas))
        assert deltas.min() >= -1e-9  # the outer optimum really is the max
        # smooth profile: second differences stay at curvature scale, no jumps
        assert np.max(np.abs(np.diff(deltas, 2))) < 0.06


class TestInitialTheta:
    def test_crude_start_when_fully_observed(self):
        d = np.array([2.0, 3.0])
        ec = np.array([5.0, 4.0])
        np.testing.assert_array_equal(initial_theta(d, ec), np.log(d / ec))

    def test_damped_start_with_zero_events(self):
        d = np.array([0.0, 3.0])
        ec = np.array([5.0, 4.0])
        theta = initial_theta(d, ec)
        assert np.all(np.isfinite(theta))
        assert theta[0] == pytest.approx(math.log(0.5 / 5.5))

    def test_global_rate_where_no_exposure(self):
        d = np.array([2.0, 0.0])
        ec = np.array([5.0, 0.0])
        theta = initial_theta(d, ec)
        assert theta[1] == pytest.approx(math.log(2.0 / 5.0))
