"""Matrix-calculus primitives: vec, Kronecker products, index permutations, null spaces.

All flat encodings in the package use column-major (Fortran) stacking.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class ConstraintError(ValueError):
    """Raised when a constraint Jacobian is rank deficient."""


def vec(M):
    M = np.asarray(M)
    return M.reshape(-1, order="F")


def unvec(v, m, n):
    return np.asarray(v).reshape((m, n), order="F")


def kron(A, B):
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


@dataclass(frozen=True)
class PermutationOp:
    """Row-selection operator stored as an index map: ``(P @ x)[i] = x[idx[i]]``.

    ``kind`` is ``"commutation"`` (square, a true permutation) or
    ``"diag_selector"`` (``m x m**2``, picks the diagonal out of ``vec(A)``).
    """

    kind: str
    idx: np.ndarray
    n_source: int

    @property
    def shape(self):
        return (self.idx.size, self.n_source)

    def apply(self, x):
        return np.asarray(x)[self.idx, ...]

    def apply_transpose(self, y):
        y = np.asarray(y)
        out = np.zeros((self.n_source,) + y.shape[1:], dtype=y.dtype)
        np.add.at(out, self.idx, y)
        return out

    def to_dense(self):
        P = np.zeros(self.shape)
        P[np.arange(self.idx.size), self.idx] = 1.0
        return P


def commutation_matrix(m, n):
    """K_mn with ``K @ vec(A) == vec(A.T)`` for every m x n matrix A."""
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    # vec(A.T)[b + n*a] = A[a, b] = vec(A)[a + m*b]
    a, b = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    idx = np.empty(m * n, dtype=np.intp)
    idx[(b + n * a).ravel()] = (a + m * b).ravel()
    return PermutationOp("commutation", idx, m * n)


def diag_selector(m):
    """R_m with ``R @ vec(A) == diag(A)`` for every m x m matrix A."""
    if m < 1:
        raise ValueError("dimension must be positive")
    return PermutationOp("diag_selector", np.arange(m) * (m + 1), m * m)


def nullspace_basis(G, tol=1e-10):
    """Orthonormal basis U of the null space of a full-row-rank ``G`` (m x p).

    Uses a Householder QR of ``G.T``; the trailing ``p - m`` columns of the
    full Q factor span ``null(G)``.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    m, p = G.shape
    if m > p:
        raise ConstraintError(f"{m} constraints on {p} unknowns")
    sv = np.linalg.svd(G, compute_uv=False)
    if sv.size == 0 or sv[-1] <= tol * max(sv[0], 1.0):
        raise ConstraintError(
            f"constraint gradient is rank deficient (smallest singular value {sv[-1]:.3e})"
        )
    Q, _ = sla.qr(G.T, mode="full")
    return Q[:, m:]
