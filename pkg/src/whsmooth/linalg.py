"""Thin wrapper around a Cholesky factorization of a symmetric positive definite matrix.

All solvers in this package reduce to factorizing ``W + P_lambda`` (or a reduced
version of it) once and reusing the factor for solves, log-determinants and
diagonals of the inverse.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import SingularSystemError


class SPDFactor:
    """Cholesky factorization of a symmetric positive definite matrix.

    Parameters
    ----------
    a : np.ndarray
        Symmetric matrix to factorize, (n, n).
    context : str, optional
        Short description used in the error message when the matrix is not
        positive definite (e.g. the invertibility condition that was violated).
    """

    def __init__(self, a: np.ndarray, context: str = ""):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        try:
            self._factor = cho_factor(a, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            msg = "matrix is not positive definite"
            if context:
                msg += f": {context}"
            raise SingularSystemError(msg) from exc
        self.n = a.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b`` for one or several right-hand sides."""
        return cho_solve(self._factor, b, check_finite=False)

    @property
    def logdet(self) -> float:
        """``ln |A|`` from the Cholesky diagonal."""
        return 2.0 * float(np.sum(np.log(np.diag(self._factor[0]))))

    @property
    def pivots(self) -> np.ndarray:
        """Squared Cholesky diagonal; small ratios flag near-singularity."""
        return np.diag(self._factor[0]) ** 2

    def inverse(self) -> np.ndarray:
        """Dense ``A^{-1}``, symmetrized to remove factorization roundoff."""
        inv = self.solve(np.eye(self.n))
        return (inv + inv.T) / 2.0

    def inverse_diag(self) -> np.ndarray:
        """Diagonal of ``A^{-1}`` (back-solve against unit vectors)."""
        return np.diag(self.inverse()).copy()
