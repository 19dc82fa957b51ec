"""Sparse complex matrices, direct factorizations and weighted inner products.

Matrices are ``scipy.sparse.csr_matrix`` objects; factorizations wrap
SuperLU (partial pivoting with a fill-reducing column ordering).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu


class SingularMatrixError(RuntimeError):
    """Raised when a factorization meets a zero (or numerically zero) pivot."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message if pivot is None else f"{message} (pivot {pivot})")
        self.pivot = pivot


def finalize(A) -> sp.csr_matrix:
    """CSR copy with summed duplicates, sorted column indices and no explicit zeros."""
    A = sp.csr_matrix(A, copy=True)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _ordering(A) -> tuple[str, np.ndarray | None]:
    """Column ordering, plus a bandwidth-reducing pre-permutation for symmetric patterns.

    SuperLU's minimum-degree ordering becomes very slow on meshes with scattered
    numbering (e.g. after red refinement); a reverse Cuthill-McKee renumbering
    first keeps it fast and lowers the fill.
    """
    pattern = sp.csr_matrix((abs(A) > 0).astype(np.int8))
    if (pattern != pattern.T).nnz == 0:
        return "MMD_AT_PLUS_A", reverse_cuthill_mckee(pattern, symmetric_mode=True)
    return "COLAMD", None


def _permute(A, perm):
    return A if perm is None else sp.csc_matrix(A[perm][:, perm])


class Factorization:
    """LU factors ``Pr A Pc = L U`` of a square sparse matrix."""

    def __init__(self, A, pivot_tol: float = 1e-14):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.shape = A.shape
        self.dtype = np.result_type(A.dtype, float)
        self._norm_max = abs(A).max() if A.nnz else 0.0
        self._perm = None
        if A.shape[0] == 0:
            self._lu = None
            return
        colperm, self._perm = _ordering(A)
        try:
            self._lu = splu(_permute(A, self._perm), permc_spec=colperm)
        except RuntimeError as exc:
            raise SingularMatrixError(f"factorization failed: {exc}") from exc
        diag = np.abs(self._lu.U.diagonal())
        small = np.flatnonzero(diag <= pivot_tol * max(self._norm_max, 1e-300))
        if len(small):
            raise SingularMatrixError("numerically singular matrix", pivot=int(small[0]))

    @property
    def fill(self) -> dict[str, int]:
        if self._lu is None:
            return {"nnz_L": 0, "nnz_U": 0}
        return {"nnz_L": int(self._lu.L.nnz), "nnz_U": int(self._lu.U.nnz)}

    def solve(self, b: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """Solve ``A x = b`` (or ``A^H x = b`` when ``adjoint``)."""
        b = np.asarray(b)
        if self._lu is None:
            return np.zeros_like(b, dtype=np.result_type(b.dtype, self.dtype))
        dtype = np.result_type(b.dtype, self.dtype)
        p = self._perm
        if p is not None:
            b = b[p]
        if np.iscomplexobj(b) and not np.issubdtype(self.dtype, np.complexfloating):
            solve = self._lu.solve
            y = solve(b.real.astype(float)) + 1j * solve(b.imag.astype(float))
        else:
            y = self._lu.solve(b.astype(dtype), trans="H" if adjoint else "N")
        if p is None:
            return y
        x = np.empty_like(y)
        x[p] = y
        return x

    def audit(self, A) -> float:
        """``max|Pr P A P^T Pc - L U| / max|A|`` (``P`` the pre-permutation)."""
        if self._lu is None:
            return 0.0
        lu = self._lu
        n = self.shape[0]
        Pr = sp.csc_matrix((np.ones(n), (lu.perm_r, np.arange(n))), shape=(n, n))
        Pc = sp.csc_matrix((np.ones(n), (np.arange(n), lu.perm_c)), shape=(n, n))
        diff = Pr @ _permute(sp.csc_matrix(A), self._perm) @ Pc - lu.L @ lu.U
        return float(abs(diff).max() / self._norm_max) if diff.nnz else 0.0


def factorize(A) -> Factorization:
    return Factorization(A)


class SpdFactorization(Factorization):
    """Factorization of a real symmetric positive-definite matrix.

    Uses symmetric-mode LU with diagonal pivots, so positivity of every pivot
    is equivalent to positive definiteness and is checked on construction.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if np.iscomplexobj(A.data):
            if np.abs(A.data.imag).max(initial=0.0) > 0:
                raise ValueError("SPD factorization needs a real matrix")
            A = sp.csc_matrix(A.real)
        self.shape = A.shape
        self.dtype = np.dtype(float)
        self._norm_max = abs(A).max() if A.nnz else 0.0
        self._perm = None
        if A.shape[0] == 0:
            self._lu = None
            return
        _, self._perm = _ordering(A)
        self._lu = splu(
            _permute(A, self._perm),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        if np.any(self._lu.U.diagonal() <= 0):
            raise SingularMatrixError("matrix is not positive definite")


def weighted_dot(W, v: np.ndarray, w: np.ndarray) -> complex:
    """``<W v, w> = w^H W v`` (linear in ``v``, conjugate-linear in ``w``)."""
    v = np.asarray(v)
    w = np.asarray(w)
    if v.shape != w.shape or (W is not None and W.shape[1] != v.shape[0]):
        raise ValueError(f"dimension mismatch: W {getattr(W, 'shape', None)}, v {v.shape}, w {w.shape}")
    Wv = v if W is None else W @ v
    return complex(np.vdot(w, Wv))


class Weight:
    """An SPD inner product ``<x, y>_W = y^H W x`` on coefficient vectors.

    ``Weight()`` is the Euclidean product, ``Weight(D)`` uses the matrix ``D``
    and ``Weight(D, inverse=True)`` uses ``D^{-1}`` (applied through a
    factorization of ``D``).
    """

    def __init__(self, matrix=None, inverse: bool = False, factor: Factorization | None = None):
        self.matrix = None if matrix is None else sp.csr_matrix(matrix)
        self.inverse = inverse
        self._factor = factor
        if self.matrix is not None and factor is None:
            self._factor = SpdFactorization(self.matrix)

    @property
    def is_identity(self) -> bool:
        return self.matrix is None

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.matrix is None:
            return x
        return self._factor.solve(x) if self.inverse else self.matrix @ x

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        if self.matrix is None:
            return x
        return self.matrix @ x if self.inverse else self._factor.solve(x)

    def dot(self, x: np.ndarray, y: np.ndarray) -> complex:
        return complex(np.vdot(y, self.apply(x)))

    def norm(self, x: np.ndarray) -> float:
        return float(np.sqrt(max(self.dot(x, x).real, 0.0)))

    def dense(self) -> np.ndarray:
        """Dense Gram matrix (small problems only)."""
        n = self.matrix.shape[0] if self.matrix is not None else None
        if n is None:
            raise ValueError("identity weight has no fixed size")
        D = self.matrix.toarray()
        return np.linalg.inv(D) if self.inverse else D


def export_matrix_market(A, path: str | Path) -> None:
    """Coordinate-format Matrix Market dump for debugging."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
