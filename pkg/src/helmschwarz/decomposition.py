"""Overlapping subdomain covers, partitions of unity, restrictions and coarse spaces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.sparse.linalg import eigsh

from .fespace import FeSpace, lattice, reference_basis
from .mesh import Mesh


@dataclass(frozen=True, eq=False)
class SubdomainCover:
    """Overlapping cover of a structured mesh by element sets.

    Subdomain ``l`` is the union of grid cells ``boxes[l] = (i0, i1, j0, j1)``
    (half-open cell ranges); ``shrunk[l]`` is the box carrying the support of
    the partition of unity.
    """

    mesh: Mesh
    n_sub_per_side: int | tuple[int, int]
    overlap_layers: int
    subdomains: list[np.ndarray]
    boxes: np.ndarray
    shrunk: np.ndarray
    H_ell: np.ndarray
    delta_ell: np.ndarray
    h_ell: np.ndarray
    Lambda: int

    @property
    def n_sub(self) -> int:
        return len(self.subdomains)

    @property
    def H_sub(self) -> float:
        return float(self.H_ell.max())

    @property
    def delta(self) -> float:
        return float(self.delta_ell.min())

    @property
    def delta_condition(self) -> bool:
        """Whether ``delta_l >= 2 h_l`` holds on every subdomain."""
        return bool(np.all(self.delta_ell >= 2.0 * self.h_ell - 1e-12))

    def summary(self) -> dict:
        return {
            "N": self.n_sub,
            "Lambda": self.Lambda,
            "H_sub": self.H_sub,
            "delta": self.delta,
            "overlap_layers": self.overlap_layers,
            "delta_ge_2h": self.delta_condition,
        }


def _split(n: int, parts: int) -> np.ndarray:
    return (np.arange(parts + 1) * n) // parts


def build_cover(mesh: Mesh, n_sub_per_side: int | tuple[int, int], overlap_layers: int) -> SubdomainCover:
    """Box cover: ``n_sub_per_side^2`` cell blocks, each grown by ``overlap_layers`` cells.

    ``n_sub_per_side`` may also be a pair ``(nx, ny)`` for rectangular layouts.

    The partition of unity lives on the blocks grown by ``overlap_layers // 2``
    cells, so its support stays ``overlap_layers - overlap_layers // 2`` cells
    away from the interior boundary of the subdomain; that distance is the
    recorded ``delta_ell``.
    """
    nx, ny = (n_sub_per_side, n_sub_per_side) if np.isscalar(n_sub_per_side) else n_sub_per_side
    if min(nx, ny) < 1:
        raise ValueError("n_sub_per_side must be >= 1")
    if overlap_layers < 2:
        raise ValueError("overlap_layers must be >= 2")
    n = mesh.n_per_side
    if max(nx, ny) > n:
        raise ValueError(f"cannot split {n} cells per side into {n_sub_per_side} subdomains")
    m = int(overlap_layers)
    cx, cy = _split(n, nx), _split(n, ny)
    cells = mesh.cell_indices()
    h = mesh.cell_size
    boxes, shrunk, subs = [], [], []
    for a in range(nx):
        for b in range(ny):
            core = np.array([cx[a], cx[a + 1], cy[b], cy[b + 1]])
            grow = np.array([-1, 1, -1, 1])
            box = np.clip(core + grow * m, 0, n)
            boxes.append(box)
            shrunk.append(np.clip(core + grow * (m // 2), 0, n))
            inside = (cells[:, 0] >= box[0]) & (cells[:, 0] < box[1]) & (cells[:, 1] >= box[2]) & (cells[:, 1] < box[3])
            subs.append(np.flatnonzero(inside))
    if nx * ny > 1 and any(len(s) == mesh.n_triangles for s in subs):
        raise ValueError("degenerate cover: a subdomain covers the whole domain; reduce overlap_layers")
    boxes = np.array(boxes)
    shrunk = np.array(shrunk)
    N = len(subs)
    member = sp.csr_matrix(
        (np.ones(sum(len(s) for s in subs)), (np.repeat(np.arange(N), [len(s) for s in subs]), np.concatenate(subs))),
        shape=(N, mesh.n_triangles),
    )
    overlap = (member @ member.T).toarray() > 0
    Lambda = int(overlap.sum(axis=1).max())
    ext = (boxes[:, [1, 3]] - boxes[:, [0, 2]]) * h
    H_ell = np.hypot(ext[:, 0], ext[:, 1])
    delta_ell = np.full(N, (m - m // 2) * h)
    h_ell = np.array([mesh.diameters()[s].max() for s in subs])
    cover = SubdomainCover(
        mesh=mesh,
        n_sub_per_side=n_sub_per_side,
        overlap_layers=m,
        subdomains=subs,
        boxes=boxes,
        shrunk=shrunk,
        H_ell=H_ell,
        delta_ell=delta_ell,
        h_ell=h_ell,
        Lambda=Lambda,
    )
    for ell in range(N):
        if not element_set_connected(mesh, subs[ell]):
            raise ValueError(f"subdomain {ell} is not edge-connected")
    return cover


def element_set_connected(mesh: Mesh, elements: np.ndarray) -> bool:
    """Whether the elements form one component under shared-edge adjacency."""
    if len(elements) == 0:
        return False
    _, tri_edges = mesh.edges()
    te = tri_edges[elements]
    ne = te.max() + 1
    inc = sp.csr_matrix((np.ones(te.size), (np.repeat(np.arange(len(elements)), 3), te.ravel())), shape=(len(elements), ne))
    adj = inc @ inc.T
    ncomp, _ = connected_components(adj, directed=False)
    return ncomp == 1


def vertex_graph(mesh: Mesh) -> sp.csr_matrix:
    edges, _ = mesh.edges()
    nv = mesh.n_vertices
    g = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(nv, nv))
    return (g + g.T).tocsr()


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    """P1 partition of unity ``chi[l]`` given by vertex values on the fine mesh."""

    cover: SubdomainCover
    chi: np.ndarray  # (N, n_vertices)
    distance: np.ndarray  # unclipped layer distances, (N, n_vertices)

    def gradients(self) -> np.ndarray:
        """Per-element gradient norms ``|grad chi_l|``, shape ``(N, n_triangles)``."""
        mesh = self.cover.mesh
        c = mesh.corners()
        B = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)
        BinvT = np.linalg.inv(B).transpose(0, 2, 1)
        vals = self.chi[:, mesh.triangles]  # (N, nt, 3)
        gref = np.stack([vals[..., 1] - vals[..., 0], vals[..., 2] - vals[..., 0]], axis=-1)
        g = np.einsum("tij,ntj->nti", BinvT, gref)
        return np.linalg.norm(g, axis=-1)

    @property
    def C_PoU(self) -> float:
        """``max_l max_tau |grad chi_l| delta_l``."""
        return float((self.gradients().max(axis=1) * self.cover.delta_ell).max())

    def delta_from_pou(self) -> np.ndarray:
        """The overlap width implied by the gradient bound with unit constant: ``1 / max |grad chi_l|``."""
        gmax = self.gradients().max(axis=1)
        return np.where(gmax > 0, 1.0 / np.where(gmax > 0, gmax, 1.0), np.inf)

    def support_distance_layers(self) -> np.ndarray:
        """Distance (in cell layers) from ``supp chi_l`` to the interior boundary of ``Omega_l``.

        ``inf`` for a subdomain whose boundary lies entirely on the domain boundary.
        """
        mesh = self.cover.mesh
        n = mesh.n_per_side
        tri = mesh.triangles
        cells = mesh.cell_indices()
        out = np.full(self.cover.n_sub, np.inf)
        for ell, box in enumerate(self.cover.boxes):
            supp = np.flatnonzero((self.chi[ell][tri] > 0).any(axis=1))
            if len(supp) == 0:
                continue
            ci, cj = cells[supp, 0], cells[supp, 1]
            dists = []
            if box[0] > 0:
                dists.append(ci.min() - box[0])
            if box[1] < n:
                dists.append(box[1] - 1 - ci.max())
            if box[2] > 0:
                dists.append(cj.min() - box[2])
            if box[3] < n:
                dists.append(box[3] - 1 - cj.max())
            if dists:
                out[ell] = min(dists)
        return out

    def check_support(self) -> bool:
        """Every support stays at least ``delta_l`` away from the interior boundary of its subdomain."""
        h = self.cover.mesh.cell_size
        return bool(np.all(self.support_distance_layers() * h >= self.cover.delta_ell - 1e-12 * h))


def build_pou(mesh: Mesh, cover: SubdomainCover) -> PartitionOfUnity:
    """Graph-distance partition of unity.

    ``d_l(x)`` is the number of edges on a shortest vertex-graph path from ``x``
    to a vertex outside the (open) shrunken box of subdomain ``l``; vertices on
    the domain boundary count as inside. The distance is clipped at
    ``overlap_layers`` and normalized: ``chi_l = d_l / sum_j d_j``.
    """
    if cover.mesh is not mesh:
        raise ValueError("cover was built on a different mesh")
    n = mesh.n_per_side
    ij = np.rint(mesh.vertices / mesh.cell_size).astype(np.int64)
    graph = vertex_graph(mesh)
    N = cover.n_sub
    clip = float(cover.overlap_layers)
    dist = np.empty((N, mesh.n_vertices))
    for ell, (i0, i1, j0, j1) in enumerate(cover.shrunk):
        i, j = ij[:, 0], ij[:, 1]
        inside_i = ((i > i0) | (i0 == 0)) & ((i < i1) | (i1 == n))
        inside_j = ((j > j0) | (j0 == 0)) & ((j < j1) | (j1 == n))
        sources = np.flatnonzero(~(inside_i & inside_j))
        if len(sources) == 0:
            dist[ell] = np.inf
        else:
            dist[ell] = dijkstra(graph, directed=False, indices=sources, unweighted=True, min_only=True)
    d = np.minimum(dist, clip)
    total = d.sum(axis=0)
    if np.any(total == 0):
        v = int(np.flatnonzero(total == 0)[0])
        raise ValueError(f"shrink too aggressive: vertex {v} at {mesh.vertices[v].tolist()} is covered by no shrunken subdomain")
    return PartitionOfUnity(cover=cover, chi=d / total, distance=dist)


def pou_on_space(pou: PartitionOfUnity, space: FeSpace) -> np.ndarray:
    """Values of every ``chi_l`` at all dofs of ``space`` (P1 interpolation), shape ``(N, n_dofs)``."""
    mesh = space.mesh
    if mesh is not pou.cover.mesh:
        raise ValueError("space and partition of unity live on different meshes")
    nodes = lattice(space.degree)
    bary = np.column_stack([1.0 - nodes.sum(axis=1), nodes])  # (nb, 3)
    out = np.empty((pou.cover.n_sub, space.n_dofs))
    vert_vals = pou.chi[:, mesh.triangles]  # (N, nt, 3)
    out[:, space.element_dofs.ravel()] = np.einsum("nti,bi->ntb", vert_vals, bary).reshape(pou.cover.n_sub, -1)
    return out


@dataclass(frozen=True, eq=False)
class LocalRestrictions:
    """Selection matrices ``R_l`` (rows = interior-of-``Omega_l`` dofs, columns = interior dofs)."""

    space: FeSpace
    cover: SubdomainCover
    indices: list[np.ndarray]  # interior-dof positions selected by each R_l
    R: list[sp.csr_matrix]

    @property
    def sizes(self) -> list[int]:
        return [len(i) for i in self.indices]


def _selection(idx: np.ndarray, n: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))


def build_subdomain_restrictions(fine: FeSpace, cover: SubdomainCover) -> LocalRestrictions:
    """``R_l`` keeps the fine dofs strictly inside ``Omega_l`` and off the domain boundary."""
    if cover.mesh is not fine.mesh:
        raise ValueError("cover was built on a different mesh")
    nt = fine.mesh.n_triangles
    pos = fine.interior_index
    indices, R = [], []
    for ell, elems in enumerate(cover.subdomains):
        in_sub = np.zeros(nt, dtype=bool)
        in_sub[elems] = True
        touched = np.zeros(fine.n_dofs, dtype=bool)
        touched[fine.element_dofs[in_sub].ravel()] = True
        outside = np.zeros(fine.n_dofs, dtype=bool)
        outside[fine.element_dofs[~in_sub].ravel()] = True
        keep = touched & ~outside
        keep[fine.boundary_dofs] = False
        idx = np.sort(pos[np.flatnonzero(keep)])
        if len(idx) == 0:
            raise ValueError(f"subdomain too thin: subdomain {ell} has no interior dofs")
        indices.append(idx)
        R.append(_selection(idx, fine.n_interior))
    return LocalRestrictions(space=fine, cover=cover, indices=indices, R=R)


@dataclass(frozen=True, eq=False)
class CoarseSpace:
    """Coarse space given by ``R0[q, j] = Phi_q(x_j)`` on interior dofs."""

    fine: FeSpace
    coarse: FeSpace
    mode: str
    R0: sp.csr_matrix


def coarse_basis_at(fine: FeSpace, coarse: FeSpace, points_dofs: np.ndarray) -> sp.csr_matrix:
    """Values of every coarse basis function at the fine dofs ``points_dofs``.

    Returns a sparse matrix of shape ``(coarse.n_dofs, len(points_dofs))``.
    """
    anc = fine.mesh.ancestor_map(coarse.mesh)
    # one fine element containing each dof
    owner = np.empty(fine.n_dofs, dtype=np.int64)
    owner[fine.element_dofs.ravel()] = np.repeat(np.arange(fine.mesh.n_triangles), fine.element_dofs.shape[1])
    ctri = anc[owner[points_dofs]]
    pts = fine.dof_coords[points_dofs]
    bary = coarse.mesh._barycentric(ctri, pts)
    vals, _ = reference_basis(coarse.degree, bary[:, 1:])
    rows = coarse.element_dofs[ctri].ravel()
    cols = np.repeat(np.arange(len(points_dofs)), vals.shape[1])
    data = vals.ravel()
    keep = np.abs(data) > 1e-14
    M = sp.csr_matrix((data[keep], (rows[keep], cols[keep])), shape=(coarse.n_dofs, len(points_dofs)))
    M.sum_duplicates()
    return M


def build_coarse_space(fine: FeSpace, coarse: FeSpace, mode: str | None = None) -> CoarseSpace:
    """Coarse restriction ``R0`` from a coarse space on an ancestor mesh.

    ``mode`` is ``"nested"`` (requires ``p_c <= p_f``) or ``"interpolated"``
    (requires ``p_c > p_f``; rows are fine nodal interpolants of the coarse
    basis). ``None`` picks the mode from the degrees.
    """
    if mode is None:
        mode = "nested" if coarse.degree <= fine.degree else "interpolated"
    if mode == "nested" and coarse.degree > fine.degree:
        raise ValueError("nested coarse space needs p_c <= p_f; use mode='interpolated'")
    if mode == "interpolated" and coarse.degree <= fine.degree:
        raise ValueError("interpolated coarse space needs p_c > p_f; use mode='nested'")
    if mode not in ("nested", "interpolated"):
        raise ValueError(f"unknown coarse mode {mode!r}")
    if not np.isclose(fine.mesh.side_length, coarse.mesh.side_length):
        raise ValueError("coarse and fine meshes cover different domains")
    if coarse.n_interior == 0:
        raise ValueError("coarse space has no interior dofs; use a finer coarse mesh or a higher p_c")
    full = coarse_basis_at(fine, coarse, np.arange(fine.n_dofs))
    interior_rows = full[coarse.interior_dofs]
    leak = abs(interior_rows[:, fine.boundary_dofs]).max() if len(fine.boundary_dofs) else 0.0
    if leak > 1e-12:
        raise ValueError("interior/boundary dof mismatch between coarse and fine spaces")
    R0 = interior_rows[:, fine.interior_dofs].tocsr()
    R0.sort_indices()
    return CoarseSpace(fine=fine, coarse=coarse, mode=mode, R0=R0)


def poincare_constant(D_loc: sp.spmatrix, M_loc: sp.spmatrix, k: float, H: float) -> float:
    """``C_P = sqrt(lambda_max(M, D)) / (k H)`` for the generalized problem on one subdomain.

    ``D_loc`` and ``M_loc`` are the subdomain Gram and mass matrices restricted
    to the subdomain dofs.
    """
    n = D_loc.shape[0]
    if n <= 400:
        from scipy.linalg import eigh

        lam = eigh(M_loc.toarray(), D_loc.toarray(), eigvals_only=True)[-1]
    else:
        lam = eigsh(sp.csc_matrix(M_loc), k=1, M=sp.csc_matrix(D_loc), which="LM", return_eigenvectors=False)[0]
    return float(np.sqrt(lam) / (k * H))
