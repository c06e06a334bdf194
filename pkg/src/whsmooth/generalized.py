"""Penalized likelihood smoothing of event counts and exposures.

Instead of smoothing the log crude rates with their asymptotic Gaussian
weights, this module maximizes the penalized likelihood

    l_P(theta) = theta' d - exp(theta)' e_c - 0.5 theta' P theta

by Newton iteration.  Each Newton step is a weighted Gaussian smoothing of
working pseudo-observations, so the first iterate from the crude-rate start
reproduces the classical smoother exactly.  Smoothing parameters are chosen
by maximizing a Laplace approximation of the marginal likelihood, either
with the selection as the outer loop (one full Newton solve per candidate
lambda) or re-selecting lambda inside each Newton step (performance
iteration; faster, without a convergence guarantee).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    ConvergenceError,
    DataInconsistencyError,
    InvalidParameterError,
)
from .linalg import SPDFactor
from .optimize import SearchConfig, brent_maximize, nelder_mead_maximize
from .penalty import PenaltyOperator, log_pdet
from .gaussian import check_invertibility, select_lambda_norm, _INVERTIBILITY

__all__ = [
    "GeneralizedFit",
    "penalized_loglik",
    "loglik",
    "loglik_gradient",
    "initial_theta",
    "newton_step",
    "newton_fit",
    "laplace_marginal_loglik",
    "marginal_loglik_at_infinity",
    "select_lambda_outer",
    "select_lambda_performance",
    "theta_infinity",
    "delta_theta",
    "delta_lambda",
]

_LOG_2PI = math.log(2.0 * math.pi)

MAX_NEWTON_ITER = 50
MAX_STEP_HALVINGS = 10


@dataclass
class GeneralizedFit:
    """Converged penalized-likelihood fit.

    ``psi_factor`` factorizes ``W_theta_hat + P`` evaluated at the returned
    ``theta_hat``; ``trace`` holds the penalized log-likelihood after each
    Newton update (nondecreasing thanks to step halving).
    """

    d: np.ndarray
    e_c: np.ndarray
    penalty: PenaltyOperator
    theta_hat: np.ndarray
    psi_factor: SPDFactor
    penalized_loglik: float
    laplace_marginal: float | None
    iterations: int
    converged: bool
    trace: list

    @cached_property
    def psi_diag(self) -> np.ndarray:
        return self.psi_factor.inverse_diag()

    @cached_property
    def edf(self) -> float:
        return float(np.sum(self.psi_diag * self.smoothing_weights))

    @property
    def smoothing_weights(self) -> np.ndarray:
        return _event_intensity(self.theta_hat, self.e_c)

    @property
    def weighted_obs(self) -> np.ndarray:
        """``(W + P) theta_hat``; what extrapolation consumes."""
        return self.smoothing_weights * self.theta_hat + self.penalty.apply(self.theta_hat)


def _check_data(d, e_c):
    d = np.asarray(d, dtype=float).ravel()
    e_c = np.asarray(e_c, dtype=float).ravel()
    if d.size != e_c.size:
        raise InvalidParameterError(f"d and e_c must have equal length, got {d.size} and {e_c.size}")
    if np.any(d < 0) or np.any(e_c < 0):
        raise InvalidParameterError("event counts and exposures must be nonnegative")
    if np.any((d > 0) & (e_c == 0)):
        raise DataInconsistencyError("cells with events but zero exposure are inconsistent")
    return d, e_c


def _event_intensity(theta, e_c):
    """``exp(theta) * e_c`` with zero-exposure cells pinned to exactly 0."""
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(theta) * e_c
    return np.where(e_c > 0, w, 0.0)


def loglik(theta, d, e_c) -> float:
    """Unpenalized log-likelihood ``theta' d - exp(theta)' e_c``."""
    d, e_c = _check_data(d, e_c)
    theta = np.asarray(theta, dtype=float).ravel()
    mu_ec = _event_intensity(theta, e_c)
    if not np.all(np.isfinite(mu_ec)):
        return -math.inf
    return float(theta @ d - np.sum(mu_ec))


def penalized_loglik(theta, d, e_c, penalty: PenaltyOperator | None) -> float:
    """Penalized log-likelihood ``l(theta) - 0.5 theta' P theta``.

    Cells with zero exposure contribute only ``theta_i d_i`` and must have
    ``d_i = 0`` (checked), so their contribution is zero.  ``penalty=None``
    means no penalty at all.
    """
    ll = loglik(theta, d, e_c)
    if not math.isfinite(ll) or penalty is None:
        return ll
    return ll - 0.5 * penalty.quad_form(np.asarray(theta, dtype=float).ravel())


def loglik_gradient(theta, d, e_c, penalty: PenaltyOperator | None) -> np.ndarray:
    """Gradient of the penalized log-likelihood: ``d - exp(theta) e_c - P theta``."""
    d, e_c = _check_data(d, e_c)
    theta = np.asarray(theta, dtype=float).ravel()
    grad = d - _event_intensity(theta, e_c)
    if penalty is not None:
        grad = grad - penalty.apply(theta)
    return grad


def newton_step(theta, d, e_c, penalty: PenaltyOperator) -> np.ndarray:
    """One full Newton update ``theta + (W + P)^{-1} (d - exp(theta) e_c - P theta)``.

    Starting from the crude rates this reproduces the classical weighted
    smoothing of ``ln(d / e_c)`` with weights ``d``.
    """
    d, e_c = _check_data(d, e_c)
    theta = np.asarray(theta, dtype=float).ravel()
    w = _event_intensity(theta, e_c)
    factor = SPDFactor(np.diag(w) + penalty.matrix, context=_INVERTIBILITY)
    return theta + factor.solve(d - w - penalty.apply(theta))


def initial_theta(d, e_c) -> np.ndarray:
    """Starting point for the Newton iteration.

    With events everywhere this is the crude-rate vector ``ln(d / e_c)``,
    which makes the first Newton iterate coincide with the classical
    weighted smoothing.  Cells with ``d = 0`` get the damped start
    ``ln((d + 1/2) / (e_c + 1/2))`` and zero-exposure cells the global log
    crude rate, so the start is always finite.
    """
    d, e_c = _check_data(d, e_c)
    exposed = e_c > 0
    if np.all(exposed) and np.all(d > 0):
        return np.log(d / e_c)
    total_d, total_ec = float(d.sum()), float(e_c.sum())
    global_rate = math.log(total_d / total_ec) if total_d > 0 and total_ec > 0 else 0.0
    theta = np.full(d.size, global_rate)
    theta[exposed] = np.log((d[exposed] + 0.5) / (e_c[exposed] + 0.5))
    return theta


def _loglik_scale(d) -> float:
    # convergence thresholds are eps * sum(d); guard the empty-events edge case
    total = float(np.sum(d))
    return total if total > 0 else 1.0


def newton_fit(d, e_c, penalty: PenaltyOperator, eps_l: float = 1e-8,
               theta0: np.ndarray | None = None,
               max_iter: int = MAX_NEWTON_ITER) -> GeneralizedFit:
    """Maximize the penalized log-likelihood by Newton iteration.

    Each update solves ``(W_k + P) step = gradient`` with
    ``W_k = Diag(exp(theta_k) e_c)``; a full step that would decrease the
    objective is halved (up to 10 times), so the trace is nondecreasing.
    Iteration stops once the objective gain drops below
    ``eps_l * sum(d)``.

    Raises
    ------
    ConvergenceError
        If the gain criterion is not met within ``max_iter`` iterations
        (the trace is attached to the exception).
    SingularSystemError
        If ``W_k + P`` is not positive definite.
    """
    d, e_c = _check_data(d, e_c)
    if penalty.n != d.size:
        raise InvalidParameterError(f"penalty grid size {penalty.n} does not match data length {d.size}")
    check_invertibility(e_c, penalty)  # W_k shares e_c's support at every iterate
    theta = initial_theta(d, e_c) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    scale = _loglik_scale(d)
    l_prev = penalized_loglik(theta, d, e_c, penalty)
    trace = [l_prev]
    converged = False
    iterations = 0

    for _ in range(max_iter):
        w = _event_intensity(theta, e_c)
        factor = SPDFactor(np.diag(w) + penalty.matrix, context=_INVERTIBILITY)
        grad = d - w - penalty.apply(theta)
        step = factor.solve(grad)
        l_new = penalized_loglik(theta + step, d, e_c, penalty)
        halvings = 0
        while l_new < l_prev and halvings < MAX_STEP_HALVINGS:
            step = 0.5 * step
            l_new = penalized_loglik(theta + step, d, e_c, penalty)
            halvings += 1
        if l_new < l_prev:
            # no ascent direction left at this resolution; keep theta
            l_new = l_prev
        else:
            theta = theta + step
        iterations += 1
        trace.append(l_new)
        gain = l_new - l_prev
        l_prev = l_new
        if gain < eps_l * scale:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"Newton iteration did not converge in {max_iter} iterations "
            f"(last gain {trace[-1] - trace[-2]:.3e})",
            trace=trace,
        )

    w_hat = _event_intensity(theta, e_c)
    factor = SPDFactor(np.diag(w_hat) + penalty.matrix, context=_INVERTIBILITY)
    if all(l == 0 for l in penalty.lambdas):
        laplace = None
    else:
        laplace = loglik(theta, d, e_c) - 0.5 * (
            penalty.quad_form(theta)
            - log_pdet(penalty)
            + factor.logdet
            - penalty.null_dim * _LOG_2PI
        )
    return GeneralizedFit(
        d=d,
        e_c=e_c,
        penalty=penalty,
        theta_hat=theta,
        psi_factor=factor,
        penalized_loglik=l_prev,
        laplace_marginal=laplace,
        iterations=iterations,
        converged=True,
        trace=trace,
    )


def laplace_marginal_loglik(fit: GeneralizedFit) -> float:
    """Laplace approximation of the marginal log-likelihood at the fit's lambda.

    ``l(theta_hat) - 0.5 [theta' P theta - ln|P|_+ + ln|W + P| - q ln 2 pi]``,
    valid only at a converged maximizer (enforced).
    """
    if not fit.converged:
        raise InvalidParameterError("Laplace marginal requires a converged fit")
    if fit.laplace_marginal is None:
        raise InvalidParameterError("Laplace marginal undefined for an all-zero penalty")
    return float(fit.laplace_marginal)


def marginal_loglik_at_infinity(d, e_c, penalty: PenaltyOperator,
                                theta_inf: np.ndarray | None = None) -> float:
    """Marginal log-likelihood convention for an infinite smoothing parameter.

    Evaluates the Laplace expression at the null-space maximum likelihood
    fit: the penalty quadratic vanishes by null-space membership while the
    determinant terms keep the supplied penalty's lambda.
    """
    d, e_c = _check_data(d, e_c)
    if theta_inf is None:
        theta_inf = theta_infinity(d, e_c, penalty)
    w_inf = _event_intensity(theta_inf, e_c)
    factor = SPDFactor(np.diag(w_inf) + penalty.matrix, context=_INVERTIBILITY)
    return loglik(theta_inf, d, e_c) - 0.5 * (
        -log_pdet(penalty) + factor.logdet - penalty.null_dim * _LOG_2PI
    )


def theta_infinity(d, e_c, penalty_template: PenaltyOperator,
                   eps_l: float = 1e-8, max_iter: int = MAX_NEWTON_ITER) -> np.ndarray:
    """Unpenalized maximum likelihood fit constrained to the penalty null space.

    The null space is the per-axis polynomial space of degree below q (their
    tensor product in 2D); the solver runs Newton on the coordinates in an
    orthonormal basis of that space.  This is the limit of the penalized fit
    as every lambda grows to infinity.
    """
    d, e_c = _check_data(d, e_c)
    basis = _null_space_basis(penalty_template)
    theta0 = initial_theta(d, e_c)
    gamma = basis.T @ theta0
    scale = _loglik_scale(d)

    l_prev = loglik(basis @ gamma, d, e_c)
    trace = [l_prev]
    for _ in range(max_iter):
        theta = basis @ gamma
        w = _event_intensity(theta, e_c)
        grad = basis.T @ (d - w)
        hess = basis.T @ (w[:, None] * basis)
        factor = SPDFactor(hess, context="null-space fit needs exposure spread over the polynomial basis")
        step = factor.solve(grad)
        l_new = loglik(basis @ (gamma + step), d, e_c)
        halvings = 0
        while l_new < l_prev and halvings < MAX_STEP_HALVINGS:
            step = 0.5 * step
            l_new = loglik(basis @ (gamma + step), d, e_c)
            halvings += 1
        if l_new >= l_prev:
            gamma = gamma + step
        else:
            l_new = l_prev
        trace.append(l_new)
        gain = l_new - l_prev
        l_prev = l_new
        if gain < eps_l * scale:
            return basis @ gamma
    raise ConvergenceError("null-space likelihood fit did not converge", trace=trace)


def _null_space_basis(penalty: PenaltyOperator) -> np.ndarray:
    """Orthonormal basis of the difference-penalty null space (zero eigenvectors)."""
    eigen = penalty.eigen
    if penalty.ndim_grid == 1:
        (u, _), = eigen
        return u[:, : penalty.orders[0]]
    (ux, _), (uz, _) = eigen
    return np.kron(uz[:, : penalty.orders[1]], ux[:, : penalty.orders[0]])


def select_lambda_outer(d, e_c, penalty_template: PenaltyOperator,
                        eps_l: float = 1e-8, eps_ml: float = 1e-8,
                        config: SearchConfig | None = None,
                        warm_start: bool = False):
    """Select lambda by maximizing the Laplace marginal as the outer loop.

    Every candidate lambda triggers a full Newton solve to tolerance
    ``eps_l``; the search stops on parameter tolerance or once objective
    gains fall below ``eps_ml * sum(d)``.  ``warm_start=True`` reuses the
    previous candidate's solution as the Newton starting point.

    Returns
    -------
    (lambdas, fit) : (tuple of float, GeneralizedFit)
    """
    d, e_c = _check_data(d, e_c)
    scale = _loglik_scale(d)
    cfg = config if config is not None else SearchConfig(ftol=eps_ml * scale)
    best = {"f": -math.inf, "fit": None}
    carry = {"theta": None}

    def objective(u):
        op = penalty_template.with_lambdas(10.0 ** np.asarray(u))
        try:
            fit = newton_fit(d, e_c, op, eps_l=eps_l, theta0=carry["theta"])
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"Newton solve failed at lambda={op.lambdas}: {exc}", trace=exc.trace
            ) from exc
        if warm_start:
            carry["theta"] = fit.theta_hat
        ml = fit.laplace_marginal
        if ml is not None and math.isfinite(ml) and ml > best["f"]:
            best["f"], best["fit"] = ml, fit
        return ml if ml is not None else -math.inf

    if penalty_template.ndim_grid == 1:
        brent_maximize(lambda u: objective(u), cfg.bracket, tol=cfg.tol,
                       max_evals=cfg.max_evals, ftol=cfg.ftol)
    else:
        nelder_mead_maximize(cfg.boxed(objective), cfg.start, tol=cfg.tol,
                             max_evals=cfg.max_evals, ftol=cfg.ftol)
    fit = best["fit"]
    if fit is None:
        raise ConvergenceError("no candidate lambda produced a finite marginal likelihood")
    return fit.penalty.lambdas, fit


#: log10 half-width of the narrowed inner bracket in later performance iterations
_PERF_BRACKET_HALFWIDTH = 1.5


def _perf_inner_config(base_cfg: SearchConfig, lambdas, start, ndim: int,
                       ftol: float) -> SearchConfig:
    """Inner-search settings for one performance iteration.

    The first iteration searches the full bracket; afterwards the scalar
    search narrows to a window around the previous selection (the optimum
    moves little between Newton steps).  Callers must re-expand when the
    narrowed search lands on an interior edge, see ``_hit_narrowed_edge``.
    """
    bracket = base_cfg.bracket
    if ndim == 1 and lambdas is not None:
        u_prev = math.log10(lambdas[0])
        bracket = (max(bracket[0], u_prev - _PERF_BRACKET_HALFWIDTH),
                   min(bracket[1], u_prev + _PERF_BRACKET_HALFWIDTH))
    start = tuple(min(max(s, bracket[0]), bracket[1]) for s in start)
    return SearchConfig(bracket=bracket, start=start, tol=base_cfg.tol,
                        max_evals=base_cfg.max_evals, ftol=ftol)


def _hit_narrowed_edge(lambdas, cfg: SearchConfig, base_cfg: SearchConfig,
                       ndim: int) -> bool:
    """True when a narrowed scalar search stopped at an artificial edge."""
    if ndim != 1 or cfg.bracket == base_cfg.bracket:
        return False
    u = math.log10(lambdas[0])
    margin = 2.0 * cfg.tol
    lo_hit = u - cfg.bracket[0] < margin and cfg.bracket[0] > base_cfg.bracket[0]
    hi_hit = cfg.bracket[1] - u < margin and cfg.bracket[1] < base_cfg.bracket[1]
    return lo_hit or hi_hit


def _working_selection(z, w, penalty_template, cfg, ndim):
    """One inner lambda selection on working data; returns (lambdas, theta)."""
    if ndim == 1:
        from .gaussian import _select_lambda_norm_working_1d
        return _select_lambda_norm_working_1d(z, w, penalty_template, cfg)
    lambdas, gfit = select_lambda_norm(z, w, penalty_template, cfg)
    return lambdas, gfit.theta_hat


def select_lambda_performance(d, e_c, penalty_template: PenaltyOperator,
                              eps_l: float = 1e-8, eps_ml: float = 1e-8,
                              config: SearchConfig | None = None,
                              max_outer: int = MAX_NEWTON_ITER):
    """Select lambda by re-estimating it inside each Newton step.

    At step k the working observations ``z_k`` and weights ``W_k`` define a
    Gaussian smoothing problem whose marginal likelihood is maximized over
    lambda; the step then applies the Gaussian smoother at the selected
    value.  Terminates on the penalized-likelihood gain criterion; because
    successive objectives use different priors, three consecutive decreases
    are treated as oscillation and reported as non-convergence.  The
    returned fit is a fresh full Newton solve at the selected lambda.

    Returns
    -------
    (lambdas, fit) : (tuple of float, GeneralizedFit)
    """
    d, e_c = _check_data(d, e_c)
    scale = _loglik_scale(d)
    base_cfg = config if config is not None else SearchConfig()
    theta = initial_theta(d, e_c)
    l_prev = -math.inf
    trace = []
    decreases = 0
    lambdas = None
    start = base_cfg.start
    converged = False

    for _ in range(max_outer):
        w = _event_intensity(theta, e_c)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(w > 0, theta + (d - w) / w, 0.0)
        ndim = penalty_template.ndim_grid
        cfg = _perf_inner_config(base_cfg, lambdas, start, ndim, eps_ml * scale)
        lambdas, theta_new = _working_selection(z, w, penalty_template, cfg, ndim)
        if _hit_narrowed_edge(lambdas, cfg, base_cfg, ndim):
            cfg = SearchConfig(bracket=base_cfg.bracket, start=start, tol=base_cfg.tol,
                               max_evals=base_cfg.max_evals, ftol=eps_ml * scale)
            lambdas, theta_new = _working_selection(z, w, penalty_template, cfg, ndim)
        theta = theta_new
        l_new = penalized_loglik(theta, d, e_c, penalty_template.with_lambdas(lambdas))
        trace.append(l_new)
        if penalty_template.ndim_grid == 2:
            start = tuple(math.log10(l) if l > 0 else base_cfg.start[i]
                          for i, l in enumerate(lambdas))
        if l_new < l_prev:
            decreases += 1
            if decreases >= 3:
                raise ConvergenceError(
                    "performance iteration oscillated (3 consecutive decreases "
                    "of the penalized likelihood)", trace=trace,
                )
        else:
            decreases = 0
        gain = l_new - l_prev
        l_prev = l_new
        if gain < eps_l * scale:
            converged = True
            break

    if not converged:
        raise ConvergenceError("performance iteration did not converge", trace=trace)
    fit = newton_fit(d, e_c, penalty_template.with_lambdas(lambdas), eps_l=eps_l)
    return lambdas, fit


def delta_theta(theta_probe, fit_ml: GeneralizedFit, theta_inf) -> float:
    """Relative penalized-likelihood error of ``theta_probe``.

    Normalizes the shortfall from the penalized maximum by the gap between
    the maximum and the null-space (infinite-penalty) fit: 0 at the
    maximizer, 1 at the polynomial fit.  Returns NaN when the gap is not
    positive (the polynomial fit is already optimal).
    """
    lp = lambda th: penalized_loglik(th, fit_ml.d, fit_ml.e_c, fit_ml.penalty)
    top = lp(fit_ml.theta_hat)
    denom = top - lp(theta_inf)
    if denom <= 0:
        return math.nan
    return float((top - lp(theta_probe)) / denom)


def delta_lambda(lambda_probe, d, e_c, penalty_template: PenaltyOperator,
                 outer: tuple | None = None, eps_l: float = 1e-8) -> float:
    """Relative marginal-likelihood error of ``lambda_probe``.

    Measured against the outer-iteration optimum, normalized by the gap to
    the infinite-penalty convention.  ``outer`` may carry a precomputed
    ``(lambdas, fit)`` pair from :func:`select_lambda_outer`.
    """
    d, e_c = _check_data(d, e_c)
    if outer is None:
        outer = select_lambda_outer(d, e_c, penalty_template, eps_l=eps_l)
    _, outer_fit = outer
    ml_outer = laplace_marginal_loglik(outer_fit)
    theta_inf = theta_infinity(d, e_c, outer_fit.penalty, eps_l=eps_l)
    ml_inf = marginal_loglik_at_infinity(d, e_c, outer_fit.penalty, theta_inf)
    denom = ml_outer - ml_inf
    if denom <= 0:
        return math.nan
    probe_fit = newton_fit(d, e_c, penalty_template.with_lambdas(lambda_probe), eps_l=eps_l)
    return float((ml_outer - laplace_marginal_loglik(probe_fit)) / denom)
