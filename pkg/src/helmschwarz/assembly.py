"""Finite-element assembly of the CAP Helmholtz form and related Gram matrices.

The sesquilinear form is

    a(u, w) = int k^-2 (A_scat grad u) . grad conj(w) - (c_scat^-2 + i V) u conj(w)

and the weighted inner product is ``(u, w)_k = k^-2 (A_scat grad u, grad w) + (u, w)``.
With ``mu = -(1 + c_scat^-2 + i V)`` one has ``a(u, w) = (u, w)_k + (mu u, w)``.
Matrices follow ``A[i, j] = a(phi_j, phi_i)`` and are restricted to interior
dofs (homogeneous Dirichlet data).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

from .fespace import FeSpace, reference_basis
from .linalg import Factorization, SpdFactorization, finalize
from .quadrature import triangle_rule

ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]
CHUNK = 20000  # elements per vectorized block


def _identity_tensor(x, y):
    out = np.zeros(np.shape(x) + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    return out


def _one(x, y):
    return np.ones(np.shape(x))


@dataclass(frozen=True)
class CapCoefficients:
    """Coefficients of the CAP problem on ``(0, L)^2``.

    ``V(r) = V0 ((r - R1) / (R_out - R1))^3`` for ``r > R1`` (zero inside), with
    ``r`` the distance to ``center`` and ``R_out`` the largest distance from
    ``center`` to a corner of the square.
    """

    k: float
    L: float = 1.0
    V0: float = 1.0
    R1: float | None = None
    center: tuple[float, float] | None = None
    preset: str = "constant"
    a_scat: ScalarField = field(default=_identity_tensor, repr=False)
    c_scat: ScalarField = field(default=_one, repr=False)

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.V0 < 0:
            raise ValueError("V0 must be non-negative")
        if self.R1 is None:
            object.__setattr__(self, "R1", 0.4 * self.L)
        if self.center is None:
            object.__setattr__(self, "center", (0.5 * self.L, 0.5 * self.L))
        if self.R1 < 0 or self.R1 >= self.R_out:
            raise ValueError(f"R1 must lie in [0, {self.R_out}), got {self.R1}")

    @property
    def R_out(self) -> float:
        cx, cy = self.center if self.center is not None else (0.5 * self.L, 0.5 * self.L)
        return float(max(np.hypot(cx - a, cy - b) for a in (0.0, self.L) for b in (0.0, self.L)))

    def V(self, x, y):
        cx, cy = self.center
        r = np.hypot(np.asarray(x) - cx, np.asarray(y) - cy)
        s = np.clip((r - self.R1) / (self.R_out - self.R1), 0.0, None)
        return self.V0 * s**3

    def mu(self, x, y):
        c = self.c_scat(x, y)
        return -(1.0 + c**-2.0 + 1j * self.V(x, y))

    @cached_property
    def C_mu(self) -> float:
        """``sup |mu|``, taken over a 401 x 401 grid that includes the corners.

        For both presets the supremum is attained at the corners farthest
        from ``center`` (``V`` is maximal and ``c_scat`` is 1 there), so the
        grid value is exact.
        """
        s = np.linspace(0.0, self.L, 401)
        X, Y = np.meshgrid(s, s)
        return float(np.abs(self.mu(X, Y)).max())

    def positive_near_boundary(self, distance: float) -> bool:
        """Whether ``V > 0`` at every point within ``distance`` of the boundary."""
        cx, cy = self.center
        closest = min(cx, cy, self.L - cx, self.L - cy)
        return closest - distance > self.R1 and self.V0 > 0


def _lens(L: float, center: tuple[float, float]):
    cx, cy = center

    def c_scat(x, y):
        return 1.0 + 0.3 * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (0.1 * L) ** 2)

    return c_scat


PRESETS = ("constant", "lens")


def make_coefficients(k: float, L: float = 1.0, preset: str = "constant", V0: float = 1.0,
                      R1: float | None = None, center: tuple[float, float] | None = None) -> CapCoefficients:
    """Coefficient presets ``constant`` (``A = I``, ``c = 1``) and ``lens``."""
    if center is None:
        center = (0.5 * L, 0.5 * L)
    if preset == "constant":
        return CapCoefficients(k=k, L=L, V0=V0, R1=R1, center=center, preset=preset)
    if preset == "lens":
        return CapCoefficients(k=k, L=L, V0=V0, R1=R1, center=center, preset=preset, c_scat=_lens(L, center))
    raise ValueError(f"unknown coefficient preset {preset!r}; expected one of {PRESETS}")


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    """Interior-dof matrices of one discrete CAP problem.

    ``A`` is the Galerkin matrix, ``D_k`` the Gram matrix of the weighted
    inner product, ``M`` the L2 mass matrix, ``M_mu`` the ``mu``-weighted mass
    matrix and ``K`` the scaled stiffness ``k^-2 (A_scat grad, grad)``.
    """

    space: FeSpace
    coeff: CapCoefficients
    A: sp.csr_matrix
    D_k: sp.csr_matrix
    M: sp.csr_matrix
    M_mu: sp.csr_matrix
    K: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def C_mu(self) -> float:
        return self.coeff.C_mu

    def factor_A(self) -> Factorization:
        cached = self.__dict__.get("_fA")
        if cached is None:
            cached = Factorization(self.A)
            object.__setattr__(self, "_fA", cached)
        return cached

    def factor_D(self) -> SpdFactorization:
        cached = self.__dict__.get("_fD")
        if cached is None:
            cached = SpdFactorization(self.D_k)
            object.__setattr__(self, "_fD", cached)
        return cached

    def factor_M(self) -> SpdFactorization:
        cached = self.__dict__.get("_fM")
        if cached is None:
            cached = SpdFactorization(self.M)
            object.__setattr__(self, "_fM", cached)
        return cached


@dataclass
class QuadratureBlock:
    """Geometry and basis data at the quadrature points of a block of elements."""

    elements: np.ndarray  # (ne,)
    x: np.ndarray  # (ne, nq)
    y: np.ndarray
    w: np.ndarray  # (ne, nq), includes |det B|
    phi: np.ndarray  # (nq, nb)
    grad: np.ndarray  # (ne, nq, nb, 2), physical gradients
    dofs: np.ndarray  # (ne, nb)


def quadrature_blocks(space: FeSpace, order: int | None = None, elements: np.ndarray | None = None,
                      chunk: int = CHUNK) -> Iterator[QuadratureBlock]:
    """Yield :class:`QuadratureBlock` objects covering ``elements`` (default: all)."""
    p = space.degree
    order = 2 * p + 2 if order is None else order
    xi, wq = triangle_rule(order)
    phi, gref = reference_basis(p, xi)
    B, b, det = space.element_maps()
    if elements is None:
        elements = np.arange(space.mesh.n_triangles)
    elements = np.asarray(elements, dtype=np.int64)
    for start in range(0, len(elements), chunk):
        el = elements[start:start + chunk]
        Be = B[el]
        pts = np.einsum("eij,qj->eqi", Be, xi) + b[el][:, None, :]
        BinvT = np.linalg.inv(Be).transpose(0, 2, 1)
        grad = np.einsum("eij,qbj->eqbi", BinvT, gref)
        yield QuadratureBlock(
            elements=el,
            x=pts[..., 0],
            y=pts[..., 1],
            w=det[el][:, None] * wq[None, :],
            phi=phi,
            grad=grad,
            dofs=space.element_dofs[el],
        )


def _check_spd_tensor(Aq: np.ndarray) -> None:
    sym = np.abs(Aq[..., 0, 1] - Aq[..., 1, 0]).max(initial=0.0)
    det = Aq[..., 0, 0] * Aq[..., 1, 1] - Aq[..., 0, 1] * Aq[..., 1, 0]
    if sym > 1e-12 * max(np.abs(Aq).max(initial=1.0), 1.0) or np.any(det <= 0) or np.any(Aq[..., 0, 0] <= 0):
        raise ValueError("A_scat is not symmetric positive definite at some quadrature point")


def _coo(rows, cols, vals, n):
    return finalize(sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)))


def assemble_forms(space: FeSpace, coeff: CapCoefficients, order: int | None = None,
                   elements: np.ndarray | None = None, interior: bool = True) -> dict[str, sp.csr_matrix]:
    """Assemble ``K``, ``M``, ``M_c`` (``c^-2``-weighted), ``M_V`` and ``M_mu``.

    Integration is restricted to ``elements`` when given (local Gram matrices
    on a subdomain). With ``interior`` the matrices act on interior dofs only.
    """
    p = space.degree
    if order is None:
        order = 2 * p + 2
    if order < 2 * p + 2:
        raise ValueError(f"quadrature order {order} too low for degree {p}; need >= {2 * p + 2}")
    n = space.n_dofs
    parts: dict[str, tuple[list, list, list]] = {name: ([], [], []) for name in ("K", "M", "M_c", "M_V", "M_mu")}
    k2 = coeff.k ** -2
    for blk in quadrature_blocks(space, order, elements):
        Aq = coeff.a_scat(blk.x, blk.y)
        _check_spd_tensor(Aq)
        c = coeff.c_scat(blk.x, blk.y)
        V = coeff.V(blk.x, blk.y)
        mu = coeff.mu(blk.x, blk.y)
        AG = np.einsum("eqij,eqbj->eqbi", Aq, blk.grad)
        local = {
            "K": k2 * np.einsum("eq,eqbi,eqai->eab", blk.w, AG, blk.grad),
            "M": np.einsum("eq,qb,qa->eab", blk.w, blk.phi, blk.phi),
            "M_c": np.einsum("eq,qb,qa->eab", blk.w * c**-2.0, blk.phi, blk.phi),
            "M_V": np.einsum("eq,qb,qa->eab", blk.w * V, blk.phi, blk.phi),
            "M_mu": np.einsum("eq,qb,qa->eab", blk.w * mu, blk.phi, blk.phi),
        }
        nb = blk.dofs.shape[1]
        r = np.repeat(blk.dofs, nb, axis=1).ravel()
        cidx = np.tile(blk.dofs, (1, nb)).ravel()
        for name, loc in local.items():
            parts[name][0].append(r)
            parts[name][1].append(cidx)
            parts[name][2].append(loc.ravel())
    mats = {name: _coo(rows, cols, vals, n) if rows else sp.csr_matrix((n, n)) for name, (rows, cols, vals) in parts.items()}
    if interior:
        idx = space.interior_dofs
        mats = {name: finalize(m[idx][:, idx]) for name, m in mats.items()}
    return mats


def assemble_cap(space: FeSpace, coeff: CapCoefficients, order: int | None = None) -> SystemMatrices:
    """Galerkin matrix ``A``, Gram matrix ``D_k``, mass ``M`` and ``M_mu`` on interior dofs."""
    f = assemble_forms(space, coeff, order)
    A = finalize(f["K"] - f["M_c"] - 1j * f["M_V"])
    D = finalize(f["K"] + f["M"])
    return SystemMatrices(space=space, coeff=coeff, A=A, D_k=D, M=f["M"], M_mu=f["M_mu"], K=f["K"])


def quadrature_values(space: FeSpace, coeffs: np.ndarray, order: int | None = None,
                      gradient: bool = False):
    """Values (and optionally physical gradients) of an FE function at all quadrature points.

    ``coeffs`` is a full coefficient vector. Returns arrays of shape
    ``(n_triangles, nq)`` (and ``(n_triangles, nq, 2)``).
    """
    coeffs = np.asarray(coeffs)
    vals, grads = [], []
    for blk in quadrature_blocks(space, order):
        loc = coeffs[blk.dofs]
        vals.append(np.einsum("qb,eb->eq", blk.phi, loc))
        if gradient:
            grads.append(np.einsum("eqbi,eb->eqi", blk.grad, loc))
    if gradient:
        return np.concatenate(vals), np.concatenate(grads)
    return np.concatenate(vals)


def load_vector(space: FeSpace, g, order: int | None = None, interior: bool = True) -> np.ndarray:
    """``F_j = int g phi_j``.

    ``g`` is either a callable ``g(x, y)`` or an array of samples at the
    quadrature points, shape ``(n_triangles, nq)`` as returned by
    :func:`quadrature_values` with the same ``order``.
    """
    p = space.degree
    order = 2 * p + 2 if order is None else order
    sampled = not callable(g)
    if sampled:
        g = np.asarray(g)
    out = None
    for blk in quadrature_blocks(space, order):
        gq = g[blk.elements] if sampled else np.asarray(g(blk.x, blk.y)) * np.ones_like(blk.x)
        if out is None:
            out = np.zeros(space.n_dofs, dtype=np.result_type(gq.dtype, float))
        loc = np.einsum("eq,eq,qb->eb", blk.w, gq, blk.phi)
        np.add.at(out, blk.dofs.ravel(), loc.ravel())
    if out is None:
        out = np.zeros(space.n_dofs)
    return out[space.interior_dofs] if interior else out


def assemble_rhs(space: FeSpace, f, order: int | None = None, interior: bool = True) -> np.ndarray:
    """Load vector ``F_j = int f phi_j`` (real basis, so no conjugation is visible)."""
    return load_vector(space, f, order, interior)


def l2_project(space: FeSpace, g, mass: Factorization | None = None, order: int | None = None,
               include_boundary: bool = False) -> np.ndarray:
    """L2-orthogonal projection of ``g`` onto the FE space.

    By default projects onto the functions vanishing on the boundary and
    returns interior coefficients; with ``include_boundary`` projects onto the
    full Lagrange space and returns full coefficients. ``g`` is a callable,
    quadrature samples, or a full coefficient vector of ``space``.
    """
    g_in = g
    if not callable(g) and np.ndim(g) == 1:
        g_in = quadrature_values(space, g, order)
    F = load_vector(space, g_in, order, interior=not include_boundary)
    if mass is None:
        M = assemble_forms(space, CapCoefficients(k=1.0, L=space.mesh.side_length), order,
                           interior=not include_boundary)["M"]
        mass = SpdFactorization(M)
    return mass.solve(F)
