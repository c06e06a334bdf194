"""Extension of a fitted smoothing beyond its original grid.

The original grid embeds into a larger one through a selection matrix C
(original positions) and its complement C-bar (new positions).  Solving the
smoothing problem on the extended grid with zero weight at new positions
extrapolates the fit; in 1D this preserves the original fitted values and
continues them with the polynomial the penalty cannot see, but in 2D the
unconstrained solution trades fidelity at the original positions for global
smoothness.  The constrained solver pins the original values exactly and
propagates their posterior covariance, adding back the innovation term that
expresses prior wiggliness of the new positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidParameterError, SingularSystemError
from .gaussian import credible_intervals as _credible_intervals
from .linalg import SPDFactor
from .penalty import PenaltyOperator, penalty_1d, penalty_2d

__all__ = [
    "GridEmbedding",
    "ExtendedPenalty",
    "ExtrapolationResult",
    "SmoothingState",
    "build_embedding",
    "extended_penalty",
    "extrapolate_unconstrained",
    "extrapolate_constrained",
    "credible_intervals_extended",
]

_PIVOT_RTOL = 1e-10


def _axis_range(rng, name):
    lo, hi = rng
    if int(lo) != lo or int(hi) != hi or lo > hi:
        raise InvalidParameterError(f"{name} range must be an integer pair lo <= hi, got {rng}")
    return int(lo), int(hi)


@dataclass(frozen=True)
class GridEmbedding:
    """Index bookkeeping between an original grid and an extension of it.

    ``orig_positions[k]`` is the extended-vector index of original cell k
    (both in the shared column-stacking order); ``new_positions`` lists the
    remaining extended cells, ascending.  ``C`` gathers original positions
    (C C' = I), ``C_bar`` gathers new ones, and ``Q`` stacks them into a
    permutation of the extended vector.
    """

    grid: tuple[tuple[int, int], ...]
    grid_plus: tuple[tuple[int, int], ...]
    orig_positions: np.ndarray
    new_positions: np.ndarray

    @property
    def n(self) -> int:
        return self.orig_positions.size

    @property
    def n_plus(self) -> int:
        return self.orig_positions.size + self.new_positions.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self.grid)

    @property
    def shape_plus(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self.grid_plus)

    @cached_property
    def C(self) -> np.ndarray:
        c = np.zeros((self.n, self.n_plus))
        c[np.arange(self.n), self.orig_positions] = 1.0
        return c

    @cached_property
    def C_bar(self) -> np.ndarray:
        c = np.zeros((self.new_positions.size, self.n_plus))
        c[np.arange(self.new_positions.size), self.new_positions] = 1.0
        return c

    @cached_property
    def Q(self) -> np.ndarray:
        return np.vstack([self.C, self.C_bar])

    def embed(self, v: np.ndarray) -> np.ndarray:
        """Scatter a vector from the original grid into the extended one (C' v)."""
        out = np.zeros(self.n_plus)
        out[self.orig_positions] = v
        return out

    def restrict(self, v_plus: np.ndarray) -> np.ndarray:
        """Gather the original positions from an extended vector (C v_plus)."""
        return np.asarray(v_plus)[self.orig_positions]


def build_embedding(grid, grid_plus) -> GridEmbedding:
    """Embed an integer grid into an enclosing one.

    ``grid`` and ``grid_plus`` are ``(lo, hi)`` in 1D or
    ``((x_lo, x_hi), (z_lo, z_hi))`` in 2D; every original range must be a
    sub-range of its extension.
    """
    grid = _normalize_grid(grid)
    grid_plus = _normalize_grid(grid_plus)
    if len(grid) != len(grid_plus):
        raise InvalidParameterError("grid and its extension must have the same dimension")
    for (lo, hi), (lo_p, hi_p) in zip(grid, grid_plus):
        if lo < lo_p or hi > hi_p:
            raise InvalidParameterError(
                f"original range {lo}..{hi} is not contained in extension {lo_p}..{hi_p}"
            )
    if len(grid) == 1:
        (lo, hi), (lo_p, hi_p) = grid[0], grid_plus[0]
        orig = np.arange(lo, hi + 1) - lo_p
    else:
        (xlo, xhi), (zlo, zhi) = grid
        (xlo_p, xhi_p), (zlo_p, zhi_p) = grid_plus
        nxp = xhi_p - xlo_p + 1
        ox, oz = xlo - xlo_p, zlo - zlo_p
        ii = np.arange(xhi - xlo + 1)
        jj = np.arange(zhi - zlo + 1)
        orig = ((ii[:, None] + ox) + (jj[None, :] + oz) * nxp).reshape(-1, order="F")
    n_plus = int(np.prod([hi - lo + 1 for lo, hi in grid_plus]))
    mask = np.ones(n_plus, dtype=bool)
    mask[orig] = False
    return GridEmbedding(
        grid=grid,
        grid_plus=grid_plus,
        orig_positions=orig.astype(int),
        new_positions=np.nonzero(mask)[0],
    )


def _normalize_grid(grid) -> tuple[tuple[int, int], ...]:
    grid = tuple(grid)
    if len(grid) == 2 and all(np.isscalar(g) for g in grid):
        grid = (grid,)
    return tuple(_axis_range(rng, f"axis {k}") for k, rng in enumerate(grid))


@dataclass
class ExtendedPenalty:
    """Extended-grid penalty with its original/new block partition.

    ``p11_correction`` is the amount the original-block of the extended
    penalty exceeds the original penalty matrix; ``p12``/``p21``/``p22``
    are the cross and new-position blocks.
    """

    operator: PenaltyOperator
    embedding: GridEmbedding
    p11_correction: np.ndarray
    p12: np.ndarray
    p21: np.ndarray
    p22: np.ndarray

    @cached_property
    def p22_factor(self) -> SPDFactor | None:
        if self.p22.shape[0] == 0:
            return None
        factor = SPDFactor(self.p22, context="extended penalty block on new positions")
        pivots = factor.pivots
        if pivots.min() < _PIVOT_RTOL * pivots.max():
            raise SingularSystemError(
                "extended penalty block on new positions is numerically singular "
                f"(pivot ratio {pivots.min() / pivots.max():.2e})"
            )
        return factor

    @cached_property
    def p22_inverse(self) -> np.ndarray:
        if self.p22_factor is None:
            return np.zeros((0, 0))
        return self.p22_factor.inverse()


def extended_penalty(embedding: GridEmbedding, orders, lambdas) -> ExtendedPenalty:
    """Assemble the penalty on the extended grid and partition it.

    The blocks come from permuting the assembled matrix into
    (original, new) order; the original-block minus the original-grid
    penalty is the correction induced by differences that straddle the
    boundary.
    """
    orders = tuple(int(q) for q in np.atleast_1d(orders))
    lambdas = tuple(float(l) for l in np.atleast_1d(lambdas))
    if len(orders) != len(embedding.grid) or len(lambdas) != len(embedding.grid):
        raise InvalidParameterError("orders and lambdas must match the grid dimension")
    if len(embedding.grid) == 1:
        op_plus = penalty_1d(embedding.shape_plus[0], orders[0], lambdas[0])
        op_orig = penalty_1d(embedding.shape[0], orders[0], lambdas[0])
    else:
        op_plus = penalty_2d(*embedding.shape_plus, *orders, *lambdas)
        op_orig = penalty_2d(*embedding.shape, *orders, *lambdas)
    p = op_plus.matrix
    o, w = embedding.orig_positions, embedding.new_positions
    return ExtendedPenalty(
        operator=op_plus,
        embedding=embedding,
        p11_correction=p[np.ix_(o, o)] - op_orig.matrix,
        p12=p[np.ix_(o, w)],
        p21=p[np.ix_(w, o)],
        p22=p[np.ix_(w, w)],
    )


@dataclass
class SmoothingState:
    """Minimal fit state extrapolation consumes: (theta_hat, weights, penalty).

    Lets a persisted fit be extended without rerunning the smoother;
    Gaussian and generalized fits expose the same surface directly.
    """

    penalty: PenaltyOperator
    theta_hat: np.ndarray
    weights: np.ndarray

    @property
    def smoothing_weights(self) -> np.ndarray:
        return self.weights

    @property
    def weighted_obs(self) -> np.ndarray:
        return self.weights * self.theta_hat + self.penalty.apply(self.theta_hat)

    @cached_property
    def psi_factor(self) -> SPDFactor:
        return SPDFactor(np.diag(self.weights) + self.penalty.matrix,
                         context="stored fit state is not positive definite")

    @cached_property
    def psi_diag(self) -> np.ndarray:
        return self.psi_factor.inverse_diag()


@dataclass
class ExtrapolationResult:
    """Extended fitted vector with its covariance and audit blocks."""

    y_plus: np.ndarray
    psi_plus: np.ndarray
    mode: str
    blocks: ExtendedPenalty
    embedding: GridEmbedding

    @property
    def theta_hat(self) -> np.ndarray:
        return self.y_plus

    @property
    def psi_diag(self) -> np.ndarray:
        return np.diag(self.psi_plus).copy()


def _fit_pieces(fit, embedding: GridEmbedding):
    penalty = fit.penalty
    if tuple(penalty.shape) != embedding.shape:
        raise InvalidParameterError(
            f"fit grid {penalty.shape} does not match embedding grid {embedding.shape}"
        )
    return penalty, np.asarray(fit.theta_hat, dtype=float), np.asarray(fit.smoothing_weights, dtype=float)


def extrapolate_unconstrained(fit, embedding: GridEmbedding) -> ExtrapolationResult:
    """Solve the smoothing problem on the extended grid.

    New positions enter with zero weight, so the fidelity term is unchanged
    and only the smoothness criterion sees them.  In 1D this reproduces the
    original fitted values at the original positions; in 2D it does not.
    """
    penalty, theta, w = _fit_pieces(fit, embedding)
    ext = extended_penalty(embedding, penalty.orders, penalty.lambdas)
    w_plus = embedding.embed(w)
    g_plus = embedding.embed(fit.weighted_obs)
    factor = SPDFactor(np.diag(w_plus) + ext.operator.matrix,
                       context="extended system needs the original fit's weight support")
    y_plus = factor.solve(g_plus)
    return ExtrapolationResult(
        y_plus=y_plus,
        psi_plus=factor.inverse(),
        mode="unconstrained",
        blocks=ext,
        embedding=embedding,
    )


def extrapolate_constrained(fit, embedding: GridEmbedding) -> ExtrapolationResult:
    """Extend the fit while preserving the original fitted values exactly.

    The new positions solve the smoothness criterion given the original
    values; the covariance transports the original posterior through that
    linear map and adds the innovation term on new positions.
    """
    penalty, theta, _ = _fit_pieces(fit, embedding)
    ext = extended_penalty(embedding, penalty.orders, penalty.lambdas)
    o, nw = embedding.orig_positions, embedding.new_positions
    n_plus = embedding.n_plus
    y_plus = np.zeros(n_plus)
    y_plus[o] = theta

    psi = fit.psi_factor.inverse()
    psi_plus = np.zeros((n_plus, n_plus))
    psi_plus[np.ix_(o, o)] = psi
    if nw.size:
        x = ext.p22_factor.solve(ext.p21)        # (P22)^{-1} P21
        y_plus[nw] = -x @ theta
        cross = -psi @ x.T                       # -Psi P12 (P22)^{-1}
        psi_plus[np.ix_(o, nw)] = cross
        psi_plus[np.ix_(nw, o)] = cross.T
        psi_plus[np.ix_(nw, nw)] = ext.p22_inverse + x @ psi @ x.T
    psi_plus = (psi_plus + psi_plus.T) / 2.0
    return ExtrapolationResult(
        y_plus=y_plus,
        psi_plus=psi_plus,
        mode="constrained",
        blocks=ext,
        embedding=embedding,
    )


def credible_intervals_extended(result: ExtrapolationResult, alpha: float):
    """Pointwise credible bounds over the extended grid."""
    return _credible_intervals(result, alpha)
