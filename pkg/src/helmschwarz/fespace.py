"""Continuous degree-p Lagrange spaces on triangle meshes."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

MAX_DEGREE = 8


@lru_cache(maxsize=None)
def lattice(p: int) -> np.ndarray:
    """Equispaced nodes ``(i/p, j/p)``, ``i + j <= p``, on the reference triangle.

    Ordered vertices first (0,0), (1,0), (0,1), then edge nodes, then interior.
    """
    pts = [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
    corner = [(0, 0), (p, 0), (0, p)]
    edge = [q for q in pts if q not in corner and (q[0] == 0 or q[1] == 0 or q[0] + q[1] == p)]
    interior = [q for q in pts if q not in corner and q not in edge]
    nodes = np.array(corner + edge + interior, dtype=float) / p
    nodes.setflags(write=False)
    return nodes


def _monomial_exponents(p: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(p + 1) for b in range(p + 1 - a)]


@lru_cache(maxsize=None)
def _coefficients(p: int) -> np.ndarray:
    nodes = lattice(p)
    exps = _monomial_exponents(p)
    V = np.column_stack([nodes[:, 0] ** a * nodes[:, 1] ** b for a, b in exps])
    return np.linalg.inv(V)  # column i holds the monomial coefficients of basis i


def reference_basis(p: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(nq, nb)`` and reference gradients ``(nq, nb, 2)`` of the nodal basis."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0:1], pts[:, 1:2]
    exps = _monomial_exponents(p)
    C = _coefficients(p)
    mono = np.hstack([x**a * y**b for a, b in exps])
    dx = np.hstack([a * x ** max(a - 1, 0) * y**b if a else np.zeros_like(x) for a, b in exps])
    dy = np.hstack([b * x**a * y ** max(b - 1, 0) if b else np.zeros_like(x) for a, b in exps])
    values = mono @ C
    grads = np.stack([dx @ C, dy @ C], axis=2)
    return values, grads


@dataclass(frozen=True, eq=False)
class FeSpace:
    """Degree-``degree`` Lagrange space on ``mesh``.

    Coefficient vectors come in two flavours: *full* vectors of length
    ``n_dofs`` (boundary dofs included) and *interior* vectors of length
    ``n_interior`` (the freedoms of functions in H^1_0). ``extend`` and
    ``restrict`` convert between them.
    """

    mesh: Mesh
    degree: int
    dof_coords: np.ndarray = field(init=False)
    element_dofs: np.ndarray = field(init=False)
    boundary_dofs: np.ndarray = field(init=False)
    interior_dofs: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.degree
        if p < 1 or p > MAX_DEGREE:
            raise ValueError(f"degree must be in 1..{MAX_DEGREE}, got {p}")
        mesh = self.mesh
        nodes = lattice(p)
        nt, nv = mesh.n_triangles, mesh.n_vertices
        edges, tri_edges = mesh.edges()
        n_edge_int = p - 1
        n_cell_int = (p - 1) * (p - 2) // 2
        nb = len(nodes)
        tri = mesh.triangles
        dofs = np.empty((nt, nb), dtype=np.int64)
        dofs[:, :3] = tri
        bary = np.column_stack([1.0 - nodes.sum(axis=1), nodes])  # (nb, 3)
        for a in range(3, 3 + 3 * n_edge_int):
            zero = int(np.argmin(bary[a]))  # local vertex opposite the edge
            i1, i2 = (zero + 1) % 3, (zero + 2) % 3
            ga, gb = tri[:, i1], tri[:, i2]
            lam_to_hi = np.where(ga < gb, bary[a, i2], bary[a, i1])
            pos = np.rint(lam_to_hi * p).astype(np.int64) - 1
            dofs[:, a] = nv + tri_edges[:, zero] * n_edge_int + pos
        base = nv + len(edges) * n_edge_int
        for a in range(3 + 3 * n_edge_int, nb):
            dofs[:, a] = base + np.arange(nt) * n_cell_int + (a - 3 - 3 * n_edge_int)
        n_dofs = base + nt * n_cell_int

        coords = np.empty((n_dofs, 2))
        corners = mesh.corners()
        phys = (
            corners[:, None, 0, :] * bary[None, :, 0, None]
            + corners[:, None, 1, :] * bary[None, :, 1, None]
            + corners[:, None, 2, :] * bary[None, :, 2, None]
        )
        coords[dofs.ravel()] = phys.reshape(-1, 2)

        L = mesh.side_length
        tol = 1e-10 * L
        x, y = coords[:, 0], coords[:, 1]
        on_bnd = (np.abs(x) < tol) | (np.abs(x - L) < tol) | (np.abs(y) < tol) | (np.abs(y - L) < tol)
        for name, val in (
            ("dof_coords", coords),
            ("element_dofs", dofs),
            ("boundary_dofs", np.flatnonzero(on_bnd)),
            ("interior_dofs", np.flatnonzero(~on_bnd)),
        ):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_dofs(self) -> int:
        return len(self.dof_coords)

    @property
    def n_interior(self) -> int:
        return len(self.interior_dofs)

    @property
    def interior_index(self) -> np.ndarray:
        """Full-dof index -> interior position (``-1`` on the boundary)."""
        cached = self.__dict__.get("_interior_index")
        if cached is None:
            cached = -np.ones(self.n_dofs, dtype=np.int64)
            cached[self.interior_dofs] = np.arange(self.n_interior)
            object.__setattr__(self, "_interior_index", cached)
        return cached

    def extend(self, v_int: np.ndarray) -> np.ndarray:
        """Pad an interior coefficient vector with zeros on the boundary."""
        v_int = np.asarray(v_int)
        out = np.zeros(self.n_dofs, dtype=np.result_type(v_int.dtype, float))
        out[self.interior_dofs] = v_int
        return out

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[self.interior_dofs]

    def element_maps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Affine maps ``x = B xi + b``: returns ``(B, b, |det B|)``."""
        c = self.mesh.corners()
        B = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)
        det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
        return B, c[:, 0], np.abs(det)


def build_space(mesh: Mesh, degree: int) -> FeSpace:
    return FeSpace(mesh, int(degree))


def nodal_interpolate(space: FeSpace, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Full coefficient vector ``f(x_j)`` over all dofs (boundary included).

    ``f`` is called once with the arrays of x and y coordinates.
    """
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    return np.asarray(np.broadcast_to(f(x, y), x.shape)).copy()


def evaluate(space: FeSpace, coeffs: np.ndarray, points: np.ndarray, triangles: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the FE function with full coefficient vector ``coeffs`` at ``points``.

    If ``triangles`` is given, each point is evaluated from that triangle's
    polynomial instead of the one found by point location (used to audit
    continuity across edges).
    """
    coeffs = np.asarray(coeffs)
    if coeffs.shape[0] != space.n_dofs:
        raise ValueError(f"expected {space.n_dofs} coefficients, got {coeffs.shape[0]}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if triangles is None:
        tri, bary = space.mesh.locate(pts)
    else:
        tri = np.asarray(triangles)
        bary = space.mesh._barycentric(tri, pts)
    vals, _ = reference_basis(space.degree, bary[:, 1:])
    local = coeffs[space.element_dofs[tri]]
    return np.einsum("qb,qb->q", vals, local)


def evaluate_with_gradient(space: FeSpace, coeffs: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and physical gradients ``(npts, 2)`` at ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri, bary = space.mesh.locate(pts)
    vals, grads = reference_basis(space.degree, bary[:, 1:])
    B, _, _ = space.element_maps()
    BinvT = np.linalg.inv(B[tri]).transpose(0, 2, 1)
    local = np.asarray(coeffs)[space.element_dofs[tri]]
    value = np.einsum("qb,qb->q", vals, local)
    gref = np.einsum("qbd,qb->qd", grads, local)
    return value, np.einsum("qij,qj->qi", BinvT, gref)


def basis_at_points(space: FeSpace, points: np.ndarray):
    """Sparse matrices of all basis values and x/y derivatives at ``points``.

    Returns ``(Phi, Phi_x, Phi_y)``, each of shape ``(n_points, n_dofs)``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri, bary = space.mesh.locate(pts)
    vals, grads = reference_basis(space.degree, bary[:, 1:])
    B, _, _ = space.element_maps()
    BinvT = np.linalg.inv(B[tri]).transpose(0, 2, 1)
    phys = np.einsum("qij,qbj->qbi", BinvT, grads)
    rows = np.repeat(np.arange(len(pts)), vals.shape[1])
    cols = space.element_dofs[tri].ravel()
    shape = (len(pts), space.n_dofs)
    return tuple(
        sp.csr_matrix((data.ravel(), (rows, cols)), shape=shape)
        for data in (vals, phys[..., 0], phys[..., 1])
    )
