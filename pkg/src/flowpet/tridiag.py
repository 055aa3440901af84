"""Batched Thomas algorithm with a reusable factorization.

All arrays have the system index on the last axis and arbitrary batch axes
in front.  ``lower[..., 0]`` and ``upper[..., -1]`` are ignored.  No
pivoting is done; the systems assembled by the transport solver are
column diagonally dominant M-matrices, for which this is stable.

Short systems (``n <= dense_limit``) also keep their explicit inverses, so
repeated solves become one batched matrix product instead of a Python loop
over the system index.
"""
import numpy as np


class TridiagonalLU:
    """LU factors of a batch of tridiagonal matrices.

    Parameters
    ----------
    lower : ndarray
        Sub-diagonal, ``lower[..., i]`` multiplies ``x[..., i-1]`` in row ``i``.
    diag : ndarray
        Main diagonal.
    upper : ndarray
        Super-diagonal, ``upper[..., i]`` multiplies ``x[..., i+1]`` in row ``i``.
    dense_limit : int
        Keep explicit inverses for systems up to this size.
    """

    def __init__(self, lower, diag, upper, dense_limit=64):
        lower, diag, upper = np.broadcast_arrays(
            np.asarray(lower, float), np.asarray(diag, float), np.asarray(upper, float))
        n = diag.shape[-1]
        piv = np.empty_like(diag)
        mult = np.zeros_like(diag)
        piv[..., 0] = diag[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in range(1, n):
                mult[..., i] = lower[..., i] / piv[..., i - 1]
                piv[..., i] = diag[..., i] - mult[..., i] * upper[..., i - 1]
        if np.any(piv == 0.0) or not np.all(np.isfinite(piv)):
            raise np.linalg.LinAlgError("singular tridiagonal system")
        self.n = n
        self.upper = upper.copy()
        self.piv = piv
        self.mult = mult
        self._inv_t = None
        if n <= dense_limit:
            eye = np.broadcast_to(np.eye(n), diag.shape[:-1] + (n, n))
            # row j holds A^{-1} e_j, i.e. the transposed inverse
            self._inv_t = self._forward_back(eye, column_batch=True)

    def solve(self, rhs):
        """Solve ``A x = rhs``."""
        if self._inv_t is not None:
            return np.matmul(np.asarray(rhs, float)[..., None, :], self._inv_t)[..., 0, :]
        return self._forward_back(rhs)

    def solve_transpose(self, rhs):
        """Solve ``A^T x = rhs`` with the same factors (``U^T L^T x = rhs``)."""
        if self._inv_t is not None:
            return np.matmul(self._inv_t, np.asarray(rhs, float)[..., None])[..., 0]
        return self._back_forward(rhs)

    def _forward_back(self, rhs, column_batch=False):
        n = self.n
        if column_batch:
            mult, piv, upper = (a[..., None, :] for a in (self.mult, self.piv, self.upper))
        else:
            mult, piv, upper = self.mult, self.piv, self.upper
        z = np.array(rhs, dtype=float, copy=True)
        for i in range(1, n):
            z[..., i] -= mult[..., i] * z[..., i - 1]
        z[..., n - 1] /= piv[..., n - 1]
        for i in range(n - 2, -1, -1):
            z[..., i] = (z[..., i] - upper[..., i] * z[..., i + 1]) / piv[..., i]
        return z

    def _back_forward(self, rhs):
        n = self.n
        z = np.array(rhs, dtype=float, copy=True)
        z[..., 0] /= self.piv[..., 0]
        for i in range(1, n):
            z[..., i] = (z[..., i] - self.upper[..., i - 1] * z[..., i - 1]) / self.piv[..., i]
        for i in range(n - 2, -1, -1):
            z[..., i] -= self.mult[..., i + 1] * z[..., i + 1]
        return z


def solve_tridiagonal(lower, diag, upper, rhs):
    return TridiagonalLU(lower, diag, upper).solve(rhs)


def tridiagonal_dense(lower, diag, upper):
    """Dense matrix of a single tridiagonal system (for checks)."""
    n = len(diag)
    return np.diag(diag) + np.diag(np.asarray(lower)[1:], -1) + np.diag(np.asarray(upper)[:-1], 1)
