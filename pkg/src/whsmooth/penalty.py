"""Difference matrices and penalty operators for 1D and 2D grids.

The smoothness penalty is ``lambda * ||D theta||^2`` where ``D`` takes q-th
order forward differences.  In 2D the penalty acts along both axes of the
(n_x, n_z) table and the assembled matrix is a Kronecker sum; vectors follow
the column-stacking convention (x index varies fastest), shared by every
module in the package.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, UndefinedPdetError

__all__ = [
    "difference_matrix",
    "PenaltyOperator",
    "penalty_1d",
    "penalty_2d",
    "log_pdet",
]


def difference_matrix(n: int, q: int) -> np.ndarray:
    """Forward difference matrix of order ``q`` on a grid of length ``n``.

    Row ``i`` holds the signed binomial pattern ``C(q, k) * (-1)^(q-k)`` at
    columns ``i..i+q``, so row 0 is ``[-1, 1]`` for q=1 and ``[1, -2, 1]``
    for q=2.  The result has shape ``(n - q, n)`` and rank ``n - q``;
    it annihilates any polynomial sequence of degree below ``q``.

    Parameters
    ----------
    n : int
        Grid length, at least 2.
    q : int
        Difference order, ``1 <= q < n``.
    """
    n, q = int(n), int(q)
    if n < 2:
        raise InvalidParameterError(f"grid length must be at least 2, got n={n}")
    if q < 1 or q >= n:
        raise InvalidParameterError(f"invalid difference order: need 1 <= q < n, got q={q}, n={n}")
    # q-fold forward differencing of the identity builds the exact integer pattern
    return np.diff(np.eye(n), q, axis=0)


@functools.lru_cache(maxsize=None)
def _axis_decomposition(n: int, q: int):
    """Per-axis structures for (n, q): D, D^T D, and its eigendecomposition.

    Cached once per (n, q) pair and shared by every penalty built on that
    axis.  Eigenvalues are sorted ascending; the first q are structurally
    zero (rank of D is exactly n - q) and are stored as exact zeros so that
    null-space counting downstream does not depend on a tolerance.
    """
    d = difference_matrix(n, q)
    dtd = d.T @ d
    s, u = np.linalg.eigh(dtd)
    s = np.clip(s, 0.0, None)
    s[:q] = 0.0
    for arr in (d, dtd, s, u):
        arr.setflags(write=False)
    return d, dtd, u, s


@dataclass(frozen=True)
class PenaltyOperator:
    """Assembled penalty matrix with its per-axis eigenstructure.

    ``shape`` is ``(n,)`` in 1D or ``(n_x, n_z)`` in 2D, with matching
    ``orders`` and ``lambdas``.  ``matrix`` is the dense n x n penalty
    (n = prod(shape)); ``apply`` and ``quad_form`` evaluate the penalty in
    factored form ``lambda * D^T (D v)``, which stays accurate for very
    large lambda where the assembled matrix-vector product cancels
    catastrophically.
    """

    shape: tuple[int, ...]
    orders: tuple[int, ...]
    lambdas: tuple[float, ...]
    matrix: np.ndarray = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    @property
    def ndim_grid(self) -> int:
        return len(self.shape)

    @property
    def eigen(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        """Per-axis (U, s) eigendecompositions of D^T D, eigenvalues ascending."""
        return tuple(
            _axis_decomposition(n, q)[2:] for n, q in zip(self.shape, self.orders)
        )

    @property
    def null_dim(self) -> int:
        """Dimension of the null space of the assembled penalty."""
        return int(np.count_nonzero(self.combined_eigenvalues() == 0.0))

    def combined_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the assembled penalty, in basis order.

        1D: ``lambda * s_i``.  2D: ``lambda_x s_{x,i} + lambda_z s_{z,j}``
        over all pairs, ordered like the Kronecker basis U_z (x) U_x.
        """
        if self.ndim_grid == 1:
            (u, s), = self.eigen
            return self.lambdas[0] * s
        (ux, sx), (uz, sz) = self.eigen
        lx, lz = self.lambdas
        return (lx * sx[:, None] + lz * sz[None, :]).reshape(-1, order="F")

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Accurate ``P v`` via per-axis difference products."""
        v = np.asarray(v, dtype=float)
        if self.ndim_grid == 1:
            (n,), (q,), (lam,) = self.shape, self.orders, self.lambdas
            d = _axis_decomposition(n, q)[0]
            return lam * (d.T @ (d @ v))
        nx, nz = self.shape
        dx = _axis_decomposition(nx, self.orders[0])[0]
        dz = _axis_decomposition(nz, self.orders[1])[0]
        lx, lz = self.lambdas
        m = v.reshape((nx, nz), order="F")
        out = lx * (dx.T @ (dx @ m)) + lz * ((m @ dz.T) @ dz)
        return out.reshape(-1, order="F")

    def quad_form(self, v: np.ndarray) -> float:
        """Accurate, guaranteed nonnegative ``v^T P v``."""
        v = np.asarray(v, dtype=float)
        if self.ndim_grid == 1:
            d = _axis_decomposition(self.shape[0], self.orders[0])[0]
            r = d @ v
            return float(self.lambdas[0] * (r @ r))
        nx, nz = self.shape
        dx = _axis_decomposition(nx, self.orders[0])[0]
        dz = _axis_decomposition(nz, self.orders[1])[0]
        m = v.reshape((nx, nz), order="F")
        rx = dx @ m
        rz = m @ dz.T
        return float(self.lambdas[0] * np.sum(rx * rx) + self.lambdas[1] * np.sum(rz * rz))

    def with_lambdas(self, lambdas) -> "PenaltyOperator":
        """New operator on the same grid and orders with different lambdas."""
        lambdas = _as_lambda_tuple(lambdas, self.ndim_grid)
        if self.ndim_grid == 1:
            return penalty_1d(self.shape[0], self.orders[0], lambdas[0])
        return penalty_2d(*self.shape, *self.orders, *lambdas)


def _as_lambda_tuple(lambdas, ndim: int) -> tuple[float, ...]:
    if np.isscalar(lambdas):
        lambdas = (float(lambdas),) * ndim
    lambdas = tuple(float(l) for l in np.atleast_1d(lambdas))
    if len(lambdas) != ndim:
        raise InvalidParameterError(
            f"expected {ndim} smoothing parameter(s), got {len(lambdas)}"
        )
    return lambdas


def penalty_1d(n: int, q: int, lam: float) -> PenaltyOperator:
    """One-dimensional penalty ``lambda * D^T D``.

    Parameters
    ----------
    n, q : int
        Grid length and difference order (1 <= q < n).
    lam : float
        Nonnegative smoothing parameter.
    """
    lam = float(lam)
    if lam < 0 or not np.isfinite(lam):
        raise InvalidParameterError(f"smoothing parameter must be finite and >= 0, got {lam}")
    dtd = _axis_decomposition(int(n), int(q))[1]
    return PenaltyOperator(
        shape=(int(n),), orders=(int(q),), lambdas=(lam,), matrix=lam * dtd
    )


def penalty_2d(n_x: int, n_z: int, q_x: int, q_z: int, lam_x: float, lam_z: float) -> PenaltyOperator:
    """Two-dimensional penalty on an (n_x, n_z) grid.

    Assembles ``lambda_x I_{n_z} (x) Dx^T Dx + lambda_z Dz^T Dz (x) I_{n_x}``
    in the shared column-stacking vector order (x index fastest).
    """
    lam_x, lam_z = float(lam_x), float(lam_z)
    for lam in (lam_x, lam_z):
        if lam < 0 or not np.isfinite(lam):
            raise InvalidParameterError(f"smoothing parameter must be finite and >= 0, got {lam}")
    dtd_x = _axis_decomposition(int(n_x), int(q_x))[1]
    dtd_z = _axis_decomposition(int(n_z), int(q_z))[1]
    mat = lam_x * np.kron(np.eye(int(n_z)), dtd_x) + lam_z * np.kron(dtd_z, np.eye(int(n_x)))
    return PenaltyOperator(
        shape=(int(n_x), int(n_z)),
        orders=(int(q_x), int(q_z)),
        lambdas=(lam_x, lam_z),
        matrix=mat,
    )


def log_pdet(op: PenaltyOperator) -> float:
    """Log-pseudo-determinant: sum of logs of the nonzero penalty eigenvalues.

    Uses the cached per-axis eigenvalues, so no decomposition of the
    assembled matrix is ever needed.  Undefined when every lambda is zero.
    """
    if all(l == 0 for l in op.lambdas):
        raise UndefinedPdetError("log-pseudo-determinant undefined for an all-zero penalty")
    ev = op.combined_eigenvalues()
    return float(np.sum(np.log(ev[ev > 0.0])))
