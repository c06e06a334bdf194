"""Grid embeddings, extended penalties and constrained/unconstrained extension."""

import numpy as np
import pytest

from whsmooth.errors import InvalidParameterError
from whsmooth.extrapolation import (
    build_embedding,
    credible_intervals_extended,
    extended_penalty,
    extrapolate_constrained,
    extrapolate_unconstrained,
)
from whsmooth.gaussian import credible_intervals, fit_gaussian
from whsmooth.generalized import newton_fit
from whsmooth.penalty import penalty_1d, penalty_2d


def _gaussian_fit_1d(n=12, q=2, lam=50.0, seed=0):
    rng = np.random.default_rng(seed)
    x = np.arange(n, dtype=float)
    y = 0.5 + 0.08 * x - 0.004 * x**2 + 0.1 * rng.normal(size=n)
    w = rng.uniform(2.0, 8.0, n)
    return fit_gaussian(y, w, penalty_1d(n, q, lam))


def _gaussian_fit_2d(nx=6, nz=5, lam=(20.0, 8.0), seed=1):
    rng = np.random.default_rng(seed)
    xs = np.arange(nx, dtype=float)[:, None]
    zs = np.arange(nz, dtype=float)[None, :]
    table = 0.2 + 0.05 * xs + 0.3 * np.exp(-0.4 * zs) + 0.05 * rng.normal(size=(nx, nz))
    w = rng.uniform(2.0, 6.0, nx * nz)
    return fit_gaussian(table.reshape(-1, order="F"), w, penalty_2d(nx, nz, 2, 2, *lam))


class TestBuildEmbedding:
    def test_trivial_embedding_is_identity(self):
        emb = build_embedding((3, 7), (3, 7))
        np.testing.assert_array_equal(emb.C, np.eye(5))
        assert emb.C_bar.shape == (0, 5)
        np.testing.assert_array_equal(emb.Q, np.eye(5))

    def test_1d_selector_structure(self):
        emb = build_embedding((2, 4), (0, 6))
        np.testing.assert_array_equal(emb.C, np.eye(7)[2:5])
        np.testing.assert_array_equal(emb.C @ emb.C.T, np.eye(3))

    def test_scatter_then_gather_roundtrip(self):
        emb = build_embedding((2, 4), (0, 6))
        y = np.array([1.0, 2.0, 3.0])
        up = emb.embed(y)
        np.testing.assert_array_equal(up, [0, 0, 1, 2, 3, 0, 0])
        np.testing.assert_array_equal(emb.restrict(up), y)

    def test_q_is_a_permutation_stacking_c_then_cbar(self):
        for grid, grid_plus in [
            ((2, 4), (0, 6)),
            (((2, 4), (1, 3)), ((0, 6), (0, 5))),
            (((2, 4), (1, 3)), ((2, 7), (1, 3))),  # one-axis extension
        ]:
            emb = build_embedding(grid, grid_plus)
            q = emb.Q
            np.testing.assert_array_equal(q @ q.T, np.eye(emb.n_plus))
            assert np.all(q.sum(axis=0) == 1) and np.all(q.sum(axis=1) == 1)
            np.testing.assert_array_equal(q[: emb.n], emb.C)
            np.testing.assert_array_equal(q[emb.n:], emb.C_bar)

    def test_2d_kronecker_selector(self):
        emb = build_embedding(((1, 2), (0, 1)), ((0, 3), (0, 2)))
        cx = np.eye(4)[1:3]
        cz = np.eye(3)[0:2]
        np.testing.assert_array_equal(emb.C, np.kron(cz, cx))

    def test_not_a_subrange_rejected(self):
        with pytest.raises(InvalidParameterError):
            build_embedding((0, 5), (1, 8))
        with pytest.raises(InvalidParameterError):
            build_embedding((0, 5), (0, 4))


class TestExtendedPenalty:
    def test_equal_grids_no_blocks(self):
        emb = build_embedding((0, 5), (0, 5))
        ext = extended_penalty(emb, (2,), (3.0,))
        np.testing.assert_allclose(ext.p11_correction, 0.0, atol=1e-14)
        assert ext.p22.shape == (0, 0)
        np.testing.assert_array_equal(ext.operator.matrix, penalty_1d(6, 2, 3.0).matrix)

    @pytest.mark.parametrize("q", [1, 2, 3])
    def test_1d_schur_complement_vanishes(self, q):
        emb = build_embedding((3, 10), (0, 14))
        ext = extended_penalty(emb, (q,), (2.0,))
        schur = ext.p11_correction - ext.p12 @ ext.p22_factor.solve(ext.p21)
        assert np.max(np.abs(schur)) < 1e-10

    def test_2d_schur_complement_does_not_vanish(self):
        emb = build_embedding(((2, 6), (1, 4)), ((0, 8), (0, 6)))
        ext = extended_penalty(emb, (2, 2), (1.0, 1.0))
        schur = ext.p11_correction - ext.p12 @ ext.p22_factor.solve(ext.p21)
        assert np.max(np.abs(schur)) > 1e-6

    def test_partition_reassembles_extended_matrix(self):
        emb = build_embedding((2, 8), (0, 11))
        lam, q = 5.0, 2
        ext = extended_penalty(emb, (q,), (lam,))
        p = ext.operator.matrix
        o, w = emb.orig_positions, emb.new_positions
        np.testing.assert_allclose(
            p[np.ix_(o, o)], penalty_1d(7, q, lam).matrix + ext.p11_correction, atol=1e-12)
        np.testing.assert_allclose(p[np.ix_(o, w)], ext.p12, atol=1e-14)
        np.testing.assert_allclose(p[np.ix_(w, w)], ext.p22, atol=1e-14)


class TestUnconstrained1D:
    def test_preserves_original_fit_and_polynomial_continuation(self):
        for q in (1, 2, 3):
            fit = _gaussian_fit_1d(n=14, q=q, lam=30.0, seed=q)
            emb = build_embedding((0, 13), (-4, 19))
            res = extrapolate_unconstrained(fit, emb)
            kept = emb.restrict(res.y_plus)
            tol = 1e-8 * (1.0 + np.max(np.abs(fit.theta_hat)))
            assert np.max(np.abs(kept - fit.theta_hat)) <= tol
            # right-side continuation lies on the polynomial through the
            # last q fitted values; left side symmetric
            x_orig = np.arange(0, 14, dtype=float)
            x_plus = np.arange(-4, 20, dtype=float)
            right = np.polynomial.polynomial.polyfit(
                x_orig[-q:], fit.theta_hat[-q:], q - 1)
            right_vals = sum(c * x_plus[18:]**k for k, c in enumerate(right))
            np.testing.assert_allclose(res.y_plus[18:], right_vals, atol=1e-6)
            left = np.polynomial.polynomial.polyfit(x_orig[:q], fit.theta_hat[:q], q - 1)
            left_vals = sum(c * x_plus[:4]**k for k, c in enumerate(left))
            np.testing.assert_allclose(res.y_plus[:4], left_vals, atol=1e-6)

    def test_trivial_extension_reproduces_fit_and_covariance(self):
        fit = _gaussian_fit_1d()
        emb = build_embedding((0, 11), (0, 11))
        res = extrapolate_unconstrained(fit, emb)
        np.testing.assert_allclose(res.y_plus, fit.theta_hat, atol=1e-10)
        np.testing.assert_allclose(np.diag(res.psi_plus), fit.psi_diag, atol=1e-10)

    def test_first_term_of_constrained_solution_vanishes(self):
        # the unconstrained part of the constrained solve contributes nothing
        fit = _gaussian_fit_1d()
        emb = build_embedding((0, 11), (-2, 14))
        ext = extended_penalty(emb, fit.penalty.orders, fit.penalty.lambdas)
        w_plus = emb.embed(fit.w)
        a_plus = np.diag(w_plus) + ext.operator.matrix
        psi_plus = np.linalg.inv(a_plus)
        c = emb.C
        proj = np.linalg.inv(c @ psi_plus @ c.T)
        wy_plus = emb.embed(fit.w * fit.y)
        first = psi_plus @ (wy_plus - c.T @ proj @ c @ psi_plus @ wy_plus)
        assert np.max(np.abs(first)) < 1e-8


class TestConstrained:
    def test_1d_constrained_equals_unconstrained(self):
        fit = _gaussian_fit_1d(seed=3)
        emb = build_embedding((0, 11), (-3, 16))
        unc = extrapolate_unconstrained(fit, emb)
        con = extrapolate_constrained(fit, emb)
        np.testing.assert_allclose(con.y_plus, unc.y_plus, atol=1e-8)

    def test_2d_constraint_holds_but_unconstrained_moves(self):
        fit = _gaussian_fit_2d()
        emb = build_embedding(((0, 5), (0, 4)), ((0, 8), (0, 6)))
        con = extrapolate_constrained(fit, emb)
        np.testing.assert_allclose(emb.restrict(con.y_plus), fit.theta_hat, atol=1e-8)
        unc = extrapolate_unconstrained(fit, emb)
        assert np.max(np.abs(emb.restrict(unc.y_plus) - fit.theta_hat)) > 1e-6

    def test_trivial_extension_reproduces_fit(self):
        fit = _gaussian_fit_2d()
        emb = build_embedding(((0, 5), (0, 4)), ((0, 5), (0, 4)))
        res = extrapolate_constrained(fit, emb)
        np.testing.assert_allclose(res.y_plus, fit.theta_hat, atol=1e-12)
        np.testing.assert_allclose(res.psi_plus, fit.psi_factor.inverse(), atol=1e-12)

    def test_posterior_identity_psi_w_y(self):
        fit = _gaussian_fit_2d(seed=4)
        emb = build_embedding(((0, 5), (0, 4)), ((0, 7), (0, 6)))
        res = extrapolate_constrained(fit, emb)
        w_plus_y_plus = emb.embed(fit.w * fit.y)
        np.testing.assert_allclose(res.psi_plus @ w_plus_y_plus, res.y_plus, atol=1e-8)

    def test_covariance_is_psd(self):
        fit = _gaussian_fit_2d(seed=5)
        emb = build_embedding(((0, 5), (0, 4)), ((0, 8), (0, 5)))
        res = extrapolate_constrained(fit, emb)
        ev = np.linalg.eigvalsh(res.psi_plus)
        assert ev.min() > -1e-8

    def test_innovation_term_is_psd_and_on_new_positions_only(self):
        fit = _gaussian_fit_2d(seed=6)
        emb = build_embedding(((0, 5), (0, 4)), ((0, 7), (0, 6)))
        res = extrapolate_constrained(fit, emb)
        ext = res.blocks
        x = ext.p22_factor.solve(ext.p21)
        psi = fit.psi_factor.inverse()
        o, nw = emb.orig_positions, emb.new_positions
        # transported covariance without the innovation term
        no_innov = np.zeros_like(res.psi_plus)
        no_innov[np.ix_(o, o)] = psi
        no_innov[np.ix_(o, nw)] = -psi @ x.T
        no_innov[np.ix_(nw, o)] = -x @ psi
        no_innov[np.ix_(nw, nw)] = x @ psi @ x.T
        diff = res.psi_plus - no_innov
        assert np.max(np.abs(diff[np.ix_(o, o)])) < 1e-12
        assert np.max(np.abs(diff[np.ix_(o, nw)])) < 1e-12
        np.testing.assert_allclose(diff[np.ix_(nw, nw)], ext.p22_inverse, atol=1e-12)
        assert np.linalg.eigvalsh(diff).min() > -1e-10


class TestCredibleIntervalsExtended:
    def test_original_positions_keep_original_widths(self):
        fit = _gaussian_fit_2d(seed=7)
        emb = build_embedding(((0, 5), (0, 4)), ((0, 7), (0, 5)))
        res = extrapolate_constrained(fit, emb)
        lo_plus, hi_plus = credible_intervals_extended(res, 0.05)
        lo, hi = credible_intervals(fit, 0.05)
        np.testing.assert_allclose(emb.restrict(hi_plus - lo_plus), hi - lo, atol=1e-10)

    def test_innovation_widens_new_position_intervals(self):
        fit = _gaussian_fit_2d(seed=8)
        emb = build_embedding(((0, 5), (0, 4)), ((0, 7), (0, 6)))
        res = extrapolate_constrained(fit, emb)
        ext = res.blocks
        x = ext.p22_factor.solve(ext.p21)
        psi = fit.psi_factor.inverse()
        nw = emb.new_positions
        var_with = np.diag(res.psi_plus)[nw]
        var_without = np.diag(x @ psi @ x.T)
        assert np.all(var_with >= var_without - 1e-12)
        assert np.min(np.diag(ext.p22_inverse)) > 0

    def test_trivial_extension_matches_direct_intervals(self):
        fit = _gaussian_fit_1d(seed=9)
        emb = build_embedding((0, 11), (0, 11))
        res = extrapolate_constrained(fit, emb)
        lo_plus, hi_plus = credible_intervals_extended(res, 0.05)
        lo, hi = credible_intervals(fit, 0.05)
        np.testing.assert_allclose(lo_plus, lo, atol=1e-12)
        np.testing.assert_allclose(hi_plus, hi, atol=1e-12)

    def test_invalid_alpha(self):
        fit = _gaussian_fit_1d()
        emb = build_embedding((0, 11), (0, 13))
        res = extrapolate_constrained(fit, emb)
        with pytest.raises(InvalidParameterError):
            credible_intervals_extended(res, 1.0)


class TestGeneralizedFitExtrapolation:
    def test_constrained_extension_of_newton_fit(self):
        rng = np.random.default_rng(10)
        nx, nz = 6, 5
        xs = np.arange(nx, dtype=float)[:, None]
        zs = np.arange(nz, dtype=float)[None, :]
        log_mu = -2.5 + 0.06 * xs + 0.5 * np.exp(-0.5 * zs)
        ec = rng.uniform(200.0, 500.0, (nx, nz))
        d = rng.poisson(np.exp(log_mu) * ec).astype(float)
        fit = newton_fit(d.reshape(-1, order="F"), ec.reshape(-1, order="F"),
                         penalty_2d(nx, nz, 2, 2, 30.0, 10.0))
        emb = build_embedding(((0, nx - 1), (0, nz - 1)), ((0, nx + 2), (0, nz + 1)))
        con = extrapolate_constrained(fit, emb)
        np.testing.assert_allclose(emb.restrict(con.y_plus), fit.theta_hat, atol=1e-8)
        ev = np.linalg.eigvalsh(con.psi_plus)
        assert ev.min() > -1e-8

    def test_1d_generalized_preservation(self):
        rng = np.random.default_rng(11)
        n = 15
        x = np.arange(n, dtype=float)
        ec = rng.uniform(100.0, 300.0, n)
        d = rng.poisson(np.exp(-3.0 + 0.05 * x + 0.3 * np.sin(x / 3)) * ec).astype(float)
        fit = newton_fit(d, ec, penalty_1d(n, 2, 20.0))
        emb = build_embedding((0, n - 1), (-3, n + 4))
        res = extrapolate_unconstrained(fit, emb)
        tol = 1e-8 * (1.0 + np.max(np.abs(fit.theta_hat)))
        assert np.max(np.abs(emb.restrict(res.y_plus) - fit.theta_hat)) <= tol
