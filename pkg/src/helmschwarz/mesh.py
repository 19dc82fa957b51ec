"""Structured simplicial meshes of the square (0, L)^2 with red refinement."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of the square ``(0, side_length)^2``.

    ``parent_of[t]`` is the index of the triangle of ``parent`` that contains
    fine triangle ``t``; both are ``None`` for meshes that were built directly.
    ``n_per_side`` is the number of grid cells along one side; every mesh
    produced here is a uniform grid of squares split along the
    lower-left/upper-right diagonal.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    side_length: float
    n_per_side: int
    parent: Mesh | None = None
    parent_of: np.ndarray | None = None
    boundary_vertices: np.ndarray = field(init=False)
    h_max: float = field(init=False)
    h_min: float = field(init=False)

    def __post_init__(self):
        L = self.side_length
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        tol = 1e-12 * L
        on_bnd = (np.abs(x) < tol) | (np.abs(x - L) < tol) | (np.abs(y) < tol) | (np.abs(y - L) < tol)
        object.__setattr__(self, "boundary_vertices", np.flatnonzero(on_bnd))
        diam = self.diameters()
        object.__setattr__(self, "h_max", float(diam.max()))
        object.__setattr__(self, "h_min", float(diam.min()))
        for arr in (self.vertices, self.triangles, self.boundary_vertices):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def cell_size(self) -> float:
        """Grid spacing ``L / n`` (the leg length of every triangle)."""
        return self.side_length / self.n_per_side

    def corners(self) -> np.ndarray:
        """Vertex coordinates per triangle, shape ``(n_triangles, 3, 2)``."""
        return self.vertices[self.triangles]

    def signed_areas(self) -> np.ndarray:
        c = self.corners()
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        c = self.corners()
        return np.stack(
            [np.linalg.norm(c[:, (i + 1) % 3] - c[:, (i + 2) % 3], axis=1) for i in range(3)],
            axis=1,
        )

    def diameters(self) -> np.ndarray:
        return self.edge_lengths().max(axis=1)

    def inradii(self) -> np.ndarray:
        perimeter = self.edge_lengths().sum(axis=1)
        return 2.0 * np.abs(self.signed_areas()) / perimeter

    def centroids(self) -> np.ndarray:
        return self.corners().mean(axis=1)

    def cell_indices(self) -> np.ndarray:
        """Grid cell ``(i, j)`` containing each triangle, shape ``(n_triangles, 2)``."""
        idx = np.floor(self.centroids() / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.n_per_side - 1)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges and the triangle-to-edge map.

        Returns ``(edges, tri_edges)`` where ``edges[e] = (a, b)`` with
        ``a < b`` and ``tri_edges[t, i]`` is the edge opposite local vertex ``i``.
        """
        tri = self.triangles
        local = np.stack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]], axis=1)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(flat, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    def check_conforming(self) -> bool:
        """Edge-hash audit: each edge is shared by one (boundary) or two triangles."""
        edges, tri_edges = self.edges()
        counts = np.bincount(tri_edges.ravel(), minlength=len(edges))
        if np.any(counts > 2) or np.any(counts < 1):
            return False
        boundary = set(self.boundary_vertices.tolist())
        for e in np.flatnonzero(counts == 1):
            a, b = edges[e]
            if a not in boundary or b not in boundary:
                return False
        # Euler characteristic of a disc: V - E + F = 1.
        return self.n_vertices - len(edges) + self.n_triangles == 1

    def ancestor_map(self, coarse: Mesh) -> np.ndarray:
        """Map fine triangles to their containing triangle in ``coarse``.

        ``coarse`` must be this mesh or reachable through ``parent`` links;
        otherwise a ``ValueError`` is raised.
        """
        if coarse is self:
            return np.arange(self.n_triangles)
        if self.parent is None or self.parent_of is None:
            raise ValueError("mesh pair is not nested: coarse mesh is not an ancestor")
        return self.parent.ancestor_map(coarse)[self.parent_of]

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle and barycentric coordinates for each point.

        Raises ``ValueError`` naming the first point outside the closed domain.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        L, n = self.side_length, self.n_per_side
        tol = 1e-12 * L
        outside = np.any((pts < -tol) | (pts > L + tol), axis=1)
        if np.any(outside):
            bad = pts[np.flatnonzero(outside)[0]]
            raise ValueError(f"point ({bad[0]!r}, {bad[1]!r}) lies outside the domain")
        cell = np.clip(np.floor(pts / self.cell_size).astype(np.int64), 0, n - 1)
        table = self._cell_table()
        cand = table[cell[:, 0], cell[:, 1]]  # (npts, 2) triangles in that cell
        tri = cand[:, 0].copy()
        bary = self._barycentric(tri, pts)
        second = bary.min(axis=1) < -1e-12
        if np.any(second):
            tri[second] = cand[second, 1]
            bary[second] = self._barycentric(tri[second], pts[second])
        return tri, bary

    def _barycentric(self, tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
        c = self.vertices[self.triangles[tri]]
        T = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)
        rhs = (pts - c[:, 0])[..., None]
        lam12 = np.linalg.solve(T, rhs)[..., 0]
        return np.column_stack([1.0 - lam12.sum(axis=1), lam12])

    def _cell_table(self) -> np.ndarray:
        cached = self.__dict__.get("_cell_table_cache")
        if cached is not None:
            return cached
        n = self.n_per_side
        cells = self.cell_indices()
        table = -np.ones((n, n, 2), dtype=np.int64)
        order = np.lexsort((cells[:, 1], cells[:, 0]))
        ci = cells[order]
        table[ci[0::2, 0], ci[0::2, 1], 0] = order[0::2]
        table[ci[1::2, 0], ci[1::2, 1], 1] = order[1::2]
        object.__setattr__(self, "_cell_table_cache", table)
        return table

    def dump(self, path: str | Path) -> None:
        """Write ``v x y`` and ``t i j k`` lines (0-based indices)."""
        lines = [f"v {x:.17g} {y:.17g}" for x, y in self.vertices]
        lines += [f"t {i} {j} {k}" for i, j, k in self.triangles]
        Path(path).write_text("\n".join(lines) + "\n")


def read_mesh_dump(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a file written by :meth:`Mesh.dump` into ``(vertices, triangles)``."""
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(parts[1]), float(parts[2])])
        elif parts[0] == "t":
            tris.append([int(p) for p in parts[1:4]])
    return np.array(verts), np.array(tris, dtype=np.int64)


def build_structured_mesh(side_length: float, n_per_side: int) -> Mesh:
    """Uniform ``n x n`` grid of squares, each split into two triangles."""
    if n_per_side < 1:
        raise ValueError("n_per_side must be >= 1")
    if side_length <= 0:
        raise ValueError("side_length must be positive")
    n = int(n_per_side)
    s = np.linspace(0.0, side_length, n + 1)
    X, Y = np.meshgrid(s, s, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    v00 = vid[:-1, :-1].ravel()
    v10 = vid[1:, :-1].ravel()
    v11 = vid[1:, 1:].ravel()
    v01 = vid[:-1, 1:].ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return Mesh(vertices=vertices, triangles=triangles, side_length=float(side_length), n_per_side=n)


def refine_uniform(mesh: Mesh, levels: int) -> Mesh:
    """Red (midpoint) refinement applied ``levels`` times.

    The returned mesh has ``parent = mesh`` and ``parent_of`` mapping every
    fine triangle to the triangle of ``mesh`` that contains it. With
    ``levels == 0`` the geometry is copied and ``parent_of`` is the identity.
    """
    if levels < 0:
        raise ValueError("levels must be non-negative")
    verts, tris = mesh.vertices, mesh.triangles
    ancestor = np.arange(len(tris))
    n = mesh.n_per_side
    for _ in range(levels):
        verts, tris, parent = _red_refine(verts, tris)
        ancestor = ancestor[parent]
        n *= 2
    return Mesh(
        vertices=np.array(verts),
        triangles=np.array(tris),
        side_length=mesh.side_length,
        n_per_side=n,
        parent=mesh,
        parent_of=ancestor,
    )


def _red_refine(verts: np.ndarray, tris: np.ndarray):
    nv = len(verts)
    local = np.stack([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]], axis=1)
    flat = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(flat, axis=0, return_inverse=True)
    mids = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
    new_verts = np.vstack([verts, mids])
    m = nv + inverse.reshape(-1, 3)  # m[:, i] = midpoint of edge opposite vertex i
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    m0, m1, m2 = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack(
        [
            np.column_stack([v0, m2, m1]),
            np.column_stack([m2, v1, m0]),
            np.column_stack([m1, m0, v2]),
            np.column_stack([m0, m1, m2]),
        ],
        axis=1,
    ).reshape(-1, 3)
    parent = np.repeat(np.arange(len(tris)), 4)
    return new_verts, children, parent


def mesh_stats(mesh: Mesh) -> dict[str, float]:
    """Element-size summary: ``h_max``, ``h_min`` and max diameter/inradius."""
    if mesh.n_triangles == 0:
        raise ValueError("empty mesh")
    ratio = mesh.diameters() / mesh.inradii()
    return {
        "h_max": mesh.h_max,
        "h_min": mesh.h_min,
        "shape_regularity": float(ratio.max()),
    }
