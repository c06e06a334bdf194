"""Eigenbasis reparameterization and reduced-rank smoothing.

Rewriting the smoothing problem in the eigenbasis of the difference penalty
turns the penalty into a diagonal matrix, exposes per-eigenvector effective
degrees of freedom, and allows dropping the most heavily penalized
directions: keeping only the p smallest-eigenvalue eigenvectors shrinks the
inner solves from n to p parameters.  Reduction is used to accelerate
smoothing-parameter selection only; the final reported fit is always the
full-rank one at the selected lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConvergenceError, InvalidParameterError, SelectionError
from .linalg import SPDFactor
from .optimize import SearchConfig, brent_maximize, nelder_mead_maximize
from .penalty import PenaltyOperator
from . import generalized as gen

__all__ = [
    "EigenBasis",
    "EdfReport",
    "ReducedFit",
    "eigen_basis",
    "choose_p",
    "fit_reduced",
    "reduced_marginal_loglik",
    "select_lambda_reduced",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EigenBasis:
    """Truncated penalty eigenbasis.

    ``axes`` holds per-axis pairs (U_p, s_p): the p smallest-eigenvalue
    eigenvectors of D'D and their eigenvalues, ascending.  In 2D the full
    basis is the Kronecker product U_z (x) U_x, materialized lazily.
    """

    shape: tuple[int, ...]
    orders: tuple[int, ...]
    axes: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def p(self) -> int:
        return int(np.prod([u.shape[1] for u, _ in self.axes]))

    @property
    def p_per_axis(self) -> tuple[int, ...]:
        return tuple(u.shape[1] for u, _ in self.axes)

    @cached_property
    def matrix(self) -> np.ndarray:
        """The n x p basis matrix with orthonormal columns."""
        if len(self.axes) == 1:
            return self.axes[0][0]
        (ux, _), (uz, _) = self.axes
        return np.kron(uz, ux)

    def penalty_diag(self, lambdas) -> np.ndarray:
        """Diagonal of the reduced penalty for the given lambda(s), basis order."""
        if len(self.axes) == 1:
            (lam,) = _lambda_tuple(lambdas, 1)
            return lam * self.axes[0][1]
        lx, lz = _lambda_tuple(lambdas, 2)
        sx, sz = self.axes[0][1], self.axes[1][1]
        return (lx * sx[:, None] + lz * sz[None, :]).reshape(-1, order="F")


def _lambda_tuple(lambdas, ndim):
    if np.isscalar(lambdas):
        return (float(lambdas),) * ndim
    t = tuple(float(l) for l in np.atleast_1d(lambdas))
    if len(t) != ndim:
        raise InvalidParameterError(f"expected {ndim} smoothing parameter(s), got {len(t)}")
    return t


@dataclass(frozen=True)
class EdfReport:
    """Per-eigenvector effective degrees of freedom and their total."""

    per_eigenvector: np.ndarray
    total: float


@dataclass
class ReducedFit:
    beta_hat: np.ndarray
    y_hat: np.ndarray
    edf_report: EdfReport
    marginal_loglik: float


def eigen_basis(penalty_template: PenaltyOperator, p) -> EigenBasis:
    """Basis of the p smallest-eigenvalue penalty eigenvectors.

    ``p`` is an integer in 1D or a pair (p_x, p_z) in 2D; each must satisfy
    ``q <= p <= n`` for its axis, since truncating below q would destroy the
    polynomial null space.
    """
    ps = (int(p),) if penalty_template.ndim_grid == 1 else tuple(int(v) for v in p)
    if len(ps) != penalty_template.ndim_grid:
        raise InvalidParameterError(
            f"expected {penalty_template.ndim_grid} truncation size(s), got {len(ps)}"
        )
    axes = []
    for (n, q, p_ax, (u, s)) in zip(
        penalty_template.shape, penalty_template.orders, ps, penalty_template.eigen
    ):
        if p_ax < q:
            raise InvalidParameterError(
                f"reduction below the null space is invalid: p={p_ax} < q={q}"
            )
        if p_ax > n:
            raise InvalidParameterError(f"cannot retain p={p_ax} > n={n} eigenvectors")
        axes.append((u[:, :p_ax], s[:p_ax]))
    return EigenBasis(shape=penalty_template.shape, orders=penalty_template.orders,
                      axes=tuple(axes))


def choose_p(n_x: int, n_z: int, p_max: int, q_x: int = 2, q_z: int = 2) -> tuple[int, int]:
    """Split a parameter budget proportionally to the grid dimensions.

    With ``kappa = sqrt(p_max / (n_x n_z))`` retains
    ``floor(min(kappa, 1) n)`` eigenvectors per axis, which guarantees
    ``p_x p_z <= p_max`` before the null-space floor is applied: each axis
    is clamped up to its order (and down to its size).
    """
    if p_max < q_x * q_z:
        raise InvalidParameterError(f"p_max must be at least q_x*q_z = {q_x * q_z}, got {p_max}")
    kappa = min(math.sqrt(p_max / (n_x * n_z)), 1.0)
    p_x = min(max(int(math.floor(kappa * n_x)), q_x), n_x)
    p_z = min(max(int(math.floor(kappa * n_z)), q_z), n_z)
    return p_x, p_z


def _reduced_normal_parts(y, w, basis: EigenBasis):
    """Lambda-independent pieces of the reduced normal equations."""
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    observed = w > 0
    y_eff = np.where(observed, y, 0.0)
    u = basis.matrix
    uw = u * w[:, None]
    m = u.T @ uw                       # U' W U
    b = uw.T @ y_eff                   # U' W y
    yy = float(np.sum(w * y_eff * y_eff))
    n_star = int(np.count_nonzero(observed))
    w_logdet = float(np.sum(np.log(w[observed]))) if n_star else 0.0
    return y_eff, w, u, m, b, yy, n_star, w_logdet


def fit_reduced(y, w, basis: EigenBasis, lambdas) -> ReducedFit:
    """Weighted penalized least squares in the truncated eigenbasis.

    Solves ``(U' W U + S_lambda) beta = U' W y`` and reports per-eigenvector
    effective degrees of freedom from ``F = (U' W U + S_lambda)^{-1} U' W U``.
    """
    y_eff, w, u, m, b, yy, n_star, w_logdet = _reduced_normal_parts(y, w, basis)
    s_lam = basis.penalty_diag(lambdas)
    a = m + np.diag(s_lam)
    factor = SPDFactor(a, context="reduced system requires weight support over the retained basis")
    beta = factor.solve(b)
    y_hat = u @ beta
    f_mat = factor.solve(m)
    edf = EdfReport(per_eigenvector=np.diag(f_mat).copy(), total=float(np.trace(f_mat)))
    marginal = _reduced_marginal(beta, b, yy, s_lam, factor, n_star, w_logdet)
    return ReducedFit(beta_hat=beta, y_hat=y_hat, edf_report=edf, marginal_loglik=marginal)


def _reduced_marginal(beta, b, yy, s_lam, factor, n_star, w_logdet) -> float:
    """Marginal log-likelihood of the reduced Gaussian smoothing model."""
    null_dim = int(np.count_nonzero(s_lam == 0.0))
    if null_dim == s_lam.size:
        return -math.inf
    # residual quadratic via the normal equations: y'Wy - 2 b'beta + beta'(M)beta,
    # folded with the penalty quadratic into y'Wy - b'beta
    quad = yy - float(b @ beta)
    s_pos = s_lam[s_lam > 0.0]
    return -0.5 * (
        quad - w_logdet - float(np.sum(np.log(s_pos))) + factor.logdet
        + (n_star - null_dim) * _LOG_2PI
    )


def reduced_marginal_loglik(lambdas, y, w, basis: EigenBasis) -> float:
    """Reduced-model marginal log-likelihood at the given lambda."""
    return fit_reduced(y, w, basis, lambdas).marginal_loglik


def _select_lambda_reduced_gaussian(y, w, basis: EigenBasis, ndim: int,
                                    cfg: SearchConfig):
    """Inner lambda search on fixed working data, reusing U'WU across probes."""
    _, _, u, m, b, yy, n_star, w_logdet = _reduced_normal_parts(y, w, basis)
    best = {"f": -math.inf, "x": None, "beta": None}

    def objective(uvec):
        lams = 10.0 ** np.atleast_1d(np.asarray(uvec, dtype=float))
        s_lam = basis.penalty_diag(lams if ndim == 2 else float(lams[0]))
        try:
            factor = SPDFactor(m + np.diag(s_lam))
        except Exception:
            return -math.inf
        beta = factor.solve(b)
        ml = _reduced_marginal(beta, b, yy, s_lam, factor, n_star, w_logdet)
        if math.isfinite(ml) and ml > best["f"]:
            best.update(f=ml, x=np.atleast_1d(np.asarray(uvec, dtype=float)).copy(), beta=beta)
        return ml

    if ndim == 1:
        brent_maximize(lambda v: objective(v), cfg.bracket, tol=cfg.tol,
                       max_evals=cfg.max_evals, ftol=cfg.ftol)
    else:
        nelder_mead_maximize(cfg.boxed(objective), cfg.start, tol=cfg.tol,
                             max_evals=cfg.max_evals, ftol=cfg.ftol)
    if best["beta"] is None:
        raise SelectionError("reduced marginal likelihood non-finite at every probed lambda")
    lams = tuple(10.0 ** v for v in best["x"])
    return lams, u @ best["beta"]


def select_lambda_reduced(d, e_c, penalty_template: PenaltyOperator, p_max: int,
                          eps_l: float = 1e-8, eps_ml: float = 1e-8,
                          config: SearchConfig | None = None,
                          max_outer: int = gen.MAX_NEWTON_ITER):
    """Performance iteration with all inner Gaussian solves in a reduced basis.

    The truncation is ``min(p_max, n)`` eigenvectors in 1D and the
    proportional :func:`choose_p` split in 2D.  Once the selection
    converges, the returned fit is the full-rank Newton solve at the
    selected lambda.

    Returns
    -------
    (lambdas, fit) : (tuple of float, GeneralizedFit)
    """
    d = np.asarray(d, dtype=float).ravel()
    e_c = np.asarray(e_c, dtype=float).ravel()
    ndim = penalty_template.ndim_grid
    if ndim == 1:
        n, q = penalty_template.shape[0], penalty_template.orders[0]
        p = min(max(int(p_max), q), n)
    else:
        p = choose_p(*penalty_template.shape, p_max,
                     q_x=penalty_template.orders[0], q_z=penalty_template.orders[1])
    basis = eigen_basis(penalty_template, p)

    scale = gen._loglik_scale(d)
    base_cfg = config if config is not None else SearchConfig()
    theta = gen.initial_theta(d, e_c)
    l_prev = -math.inf
    trace = []
    decreases = 0
    lambdas = None
    start = base_cfg.start
    converged = False

    for _ in range(max_outer):
        w = gen._event_intensity(theta, e_c)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(w > 0, theta + (d - w) / w, 0.0)
        cfg = gen._perf_inner_config(base_cfg, lambdas, start, ndim, eps_ml * scale)
        lambdas, theta_new = _select_lambda_reduced_gaussian(z, w, basis, ndim, cfg)
        if gen._hit_narrowed_edge(lambdas, cfg, base_cfg, ndim):
            cfg = SearchConfig(bracket=base_cfg.bracket, start=start, tol=base_cfg.tol,
                               max_evals=base_cfg.max_evals, ftol=eps_ml * scale)
            lambdas, theta_new = _select_lambda_reduced_gaussian(z, w, basis, ndim, cfg)
        theta = theta_new
        l_new = gen.penalized_loglik(theta, d, e_c, penalty_template.with_lambdas(lambdas))
        trace.append(l_new)
        if ndim == 2:
            start = tuple(math.log10(l) if l > 0 else base_cfg.start[i]
                          for i, l in enumerate(lambdas))
        if l_new < l_prev:
            decreases += 1
            if decreases >= 3:
                raise ConvergenceError(
                    "reduced performance iteration oscillated", trace=trace)
        else:
            decreases = 0
        gain = l_new - l_prev
        l_prev = l_new
        if gain < eps_l * scale:
            converged = True
            break

    if not converged:
        raise ConvergenceError("reduced performance iteration did not converge", trace=trace)
    fit = gen.newton_fit(d, e_c, penalty_template.with_lambdas(lambdas), eps_l=eps_l)
    return lambdas, fit
