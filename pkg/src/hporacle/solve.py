"""Sparse Cholesky factorization of the assembled SPD system.

SuperLU is run in symmetric mode with diagonal pivoting under a minimum
degree ordering of ``A + A^T``; with no off-diagonal pivoting the LU factors
of the permuted matrix are ``L D L^T`` and the Cholesky factor is
``L sqrt(D)``.  A non-positive pivot is reported as an error since it means
the matrix was not SPD.
"""
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class Factorization:
    def __init__(self, lu, n):
        self._lu = lu
        self.n = n

    @property
    def perm(self):
        """``perm[i]`` is the original row placed at position i."""
        return np.argsort(self._lu.perm_r)

    @property
    def pivots(self):
        return self._lu.U.diagonal()

    def lower(self):
        """Cholesky factor ``L`` with ``A[perm][:, perm] = L L^T``."""
        return (self._lu.L @ sp.diags(np.sqrt(self.pivots))).tocsr()

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {rhs.shape[0]}, system has {self.n}")
        if self.n == 0:
            return rhs.copy()
        return self._lu.solve(rhs)


def factorize(system, ordering="mmd"):
    """Factorize a ``SparseSystem`` (or a bare sparse matrix)."""
    A = getattr(system, "matrix", system)
    A = sp.csc_matrix(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if n == 0:
        return Factorization(None, 0)
    asym = abs(A - A.T).max() if A.nnz else 0.0
    if asym > 1e-12 * max(abs(A).max(), 1.0):
        raise ValueError(f"matrix is not symmetric (defect {asym:.3g})")
    permc = {"mmd": "MMD_AT_PLUS_A", "natural": "NATURAL"}[ordering]
    try:
        lu = splu(A, permc_spec=permc, diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotPositiveDefiniteError("factorization needed off-diagonal pivoting")
    d = lu.U.diagonal()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        k = int(np.argmin(d))
        raise NotPositiveDefiniteError(f"non-positive pivot {d[k]:.3g} at step {k}")
    return Factorization(lu, n)


def solve(fact, rhs):
    return fact.solve(rhs)
