"""One- and two-level overlapping Schwarz preconditioners applied matrix-free.

With ``C = R0^T A0^-1 R0`` and ``S = sum_l R_l^T A_l^-1 R_l``:

* additive:      ``B^-1 = C + S``
* hybrid_left:   ``B^-1 = C + D^-1 (I - A^H C^H) D S (I - A C)``
* hybrid_right:  ``B^-1 = C + (I - C A) S (I - D C^H A^H D^-1)``

``D`` is the Gram matrix of the weighted inner product. The left variants are
paired with GMRES on ``B^-1 A`` in the ``D`` inner product, the right variant
with ``A B^-1`` in the ``D^-1`` inner product.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import Factorization, SingularMatrixError, SpdFactorization, Weight

VARIANTS = ("additive", "hybrid_left", "hybrid_right")


def thread_count() -> int:
    """Worker count for subdomain solves, capped by ``HELM_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("HELM_THREADS", "1")))
    except ValueError:
        return 1


class SingularBlockError(SingularMatrixError):
    """A coarse or local Galerkin block could not be factorized."""

    def __init__(self, block: str, cause: SingularMatrixError):
        super().__init__(
            f"singular {block}: the Dirichlet problem on it is (near) resonant; "
            "reduce k times the subdomain size or change the cover",
            pivot=cause.pivot,
        )
        self.block = block


@dataclass(eq=False)
class SchwarzPreconditioner:
    variant: str
    A: sp.csr_matrix
    D_k: sp.csr_matrix
    R0: sp.csr_matrix | None
    local_indices: list[np.ndarray]
    fact_coarse: Factorization | None
    fact_local: list[Factorization]
    fact_Dk: SpdFactorization

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def fact_coarse_adj(self) -> Factorization | None:
        """The adjoint coarse solves reuse the coarse factors (``A0^H = U^H L^H``)."""
        return self.fact_coarse

    @property
    def default_side(self) -> str:
        return "right" if self.variant == "hybrid_right" else "left"

    # building blocks -----------------------------------------------------
    def coarse(self, r: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """``C r`` or ``C^H r``."""
        if self.R0 is None:
            return np.zeros_like(r, dtype=complex)
        return self.R0.T @ self.fact_coarse.solve(self.R0 @ r, adjoint=adjoint)

    def local(self, r: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """``S r`` or ``S^H r``, summed in subdomain order."""
        out = np.zeros(self.n, dtype=complex)
        jobs = list(zip(self.local_indices, self.fact_local))
        if not jobs:
            return out

        def solve(job):
            idx, fac = job
            return fac.solve(r[idx], adjoint=adjoint)

        workers = min(thread_count(), len(jobs))
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(solve, jobs))
        else:
            parts = [solve(j) for j in jobs]
        for (idx, _), part in zip(jobs, parts):
            out[idx] += part
        return out

    def D(self, x):
        return self.D_k @ x

    def Dinv(self, x):
        return self.fact_Dk.solve(x)

    # the three variants --------------------------------------------------
    def apply_additive(self, r: np.ndarray) -> np.ndarray:
        return self.coarse(r) + self.local(r)

    def apply_hybrid_left(self, r: np.ndarray) -> np.ndarray:
        A = self.A
        y = r - A @ self.coarse(r)
        t = self.D(self.local(y))
        t = t - A.conj().T @ self.coarse(t, adjoint=True)
        return self.coarse(r) + self.Dinv(t)

    def apply_hybrid_right(self, r: np.ndarray) -> np.ndarray:
        A = self.A
        s = A.conj().T @ self.Dinv(r)
        y = r - self.D(self.coarse(s, adjoint=True))
        z = self.local(y)
        return self.coarse(r) + z - self.coarse(A @ z)

    def apply(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r)
        if r.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}, got shape {r.shape}")
        return getattr(self, f"apply_{self.variant}")(r)

    def apply_adjoint(self, r: np.ndarray) -> np.ndarray:
        """Euclidean adjoint ``B^-H r``."""
        A = self.A
        AH = A.conj().T
        if self.variant == "additive":
            return self.coarse(r, adjoint=True) + self.local(r, adjoint=True)
        if self.variant == "hybrid_left":
            s = self.Dinv(r)
            s = self.D(s - self.coarse(A @ s))
            s = self.local(s, adjoint=True)
            return self.coarse(r, adjoint=True) + s - self.coarse(AH @ s, adjoint=True)
        s = r - AH @ self.coarse(r, adjoint=True)
        s = self.local(s, adjoint=True)
        s = s - self.Dinv(A @ self.coarse(self.D(s)))
        return self.coarse(r, adjoint=True) + s

    def operator(self, side: str | None = None) -> "ProjectedOperator":
        return ProjectedOperator(self, side or self.default_side)


def setup(A, D_k, R0=None, local=None, variant: str = "hybrid_left",
          fact_Dk: SpdFactorization | None = None) -> SchwarzPreconditioner:
    """Factorize the coarse block ``R0 A R0^T`` and the local blocks ``R_l A R_l^T``.

    ``local`` is a sequence of interior-dof index arrays (or an object with an
    ``indices`` attribute); ``R0=None`` means no coarse level.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    A = sp.csr_matrix(A)
    D_k = sp.csr_matrix(D_k)
    n = A.shape[0]
    if A.shape != (n, n) or D_k.shape != (n, n):
        raise ValueError("A and D_k must be square and of equal size")
    indices = [] if local is None else list(getattr(local, "indices", local))
    fact_coarse = None
    if R0 is not None:
        R0 = sp.csr_matrix(R0)
        if R0.shape[1] != n:
            raise ValueError(f"R0 has {R0.shape[1]} columns, expected {n}")
        A0 = R0 @ A @ R0.T
        try:
            fact_coarse = Factorization(A0)
        except SingularMatrixError as exc:
            raise SingularBlockError("coarse block A0", exc) from exc
    fact_local = []
    for ell, idx in enumerate(indices):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"local block {ell} indexes outside 0..{n - 1}")
        try:
            fact_local.append(Factorization(A[idx][:, idx]))
        except SingularMatrixError as exc:
            raise SingularBlockError(f"local block {ell}", exc) from exc
    if fact_Dk is None:
        fact_Dk = SpdFactorization(D_k)
    return SchwarzPreconditioner(
        variant=variant,
        A=A,
        D_k=D_k,
        R0=R0,
        local_indices=[np.asarray(i) for i in indices],
        fact_coarse=fact_coarse,
        fact_local=fact_local,
        fact_Dk=fact_Dk,
    )


def apply_additive(P: SchwarzPreconditioner, r):
    return P.apply_additive(np.asarray(r))


def apply_hybrid_left(P: SchwarzPreconditioner, r):
    return P.apply_hybrid_left(np.asarray(r))


def apply_hybrid_right(P: SchwarzPreconditioner, r):
    return P.apply_hybrid_right(np.asarray(r))


class ProjectedOperator:
    """``B^-1 A`` (side ``left``, weight ``D_k``) or ``A B^-1`` (side ``right``, weight ``D_k^-1``).

    ``matvec`` applies the operator, ``rmatvec`` its Euclidean adjoint and
    ``weight`` is the inner product it is analysed in.
    """

    def __init__(self, P: SchwarzPreconditioner, side: str = "left"):
        if side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")
        self.P = P
        self.side = side
        self.shape = P.A.shape
        self.weight = Weight(P.D_k, inverse=(side == "right"), factor=P.fact_Dk)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        P = self.P
        return P.apply(P.A @ v) if self.side == "left" else P.A @ P.apply(v)

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        P = self.P
        AH = P.A.conj().T
        return AH @ P.apply_adjoint(v) if self.side == "left" else P.apply_adjoint(AH @ v)

    __call__ = matvec


def apply_projected_operator(P: SchwarzPreconditioner, side: str, v) -> np.ndarray:
    """``B^-1 A v`` for ``side == 'left'``, ``A B^-1 v`` for ``side == 'right'``."""
    return ProjectedOperator(P, side).matvec(np.asarray(v))
