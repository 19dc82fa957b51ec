"""Measured norms, fields of values, splittings, decay rates and coarse-space quality."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import (
    SystemMatrices,
    assemble_cap,
    assemble_forms,
    load_vector,
    quadrature_blocks,
    quadrature_values,
)
from .decomposition import build_coarse_space, coarse_basis_at, pou_on_space, vertex_graph
from .fespace import FeSpace, basis_at_points, build_space
from .linalg import Factorization, SpdFactorization, Weight
from .preconditioner import ProjectedOperator, SchwarzPreconditioner, setup
from .problem import HelmholtzProblem

# ---------------------------------------------------------------------------
# operator norms and fields of values


def _operator_pair(operator):
    """``(v -> M v, v -> M^H v)`` for matrices or objects with ``matvec``/``rmatvec``."""
    if hasattr(operator, "matvec") and hasattr(operator, "rmatvec"):
        return operator.matvec, operator.rmatvec
    if sp.issparse(operator) or isinstance(operator, np.ndarray):
        MH = operator.conj().T
        return (lambda v: operator @ v), (lambda v: MH @ v)
    raise TypeError("operator must be a matrix or provide matvec and rmatvec")


def _random_complex(rng, n, m=None):
    shape = (n,) if m is None else (n, m)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def estimate_weighted_norm(operator, W: Weight | None = None, iters: int = 50, seed: int = 0) -> float:
    """Power iteration on ``M* M`` with ``M* = W^-1 M^H W``; returns ``max ||M x||_W / ||x||_W``.

    The result never exceeds the true norm.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    W = W or Weight()
    mv, rmv = _operator_pair(operator)
    n = operator.shape[0]
    rng = np.random.default_rng(seed)
    best = 0.0
    restarts = 0
    x = _random_complex(rng, n)
    x /= W.norm(x)
    it = 0
    while it < iters:
        y = mv(x)
        ny = W.norm(y)
        z = W.apply_inverse(rmv(W.apply(y))) if ny > 0 else y
        nz = W.norm(z)
        if ny == 0 or nz == 0:
            restarts += 1
            if restarts > 3:
                raise RuntimeError("power iteration broke down four times (operator looks like zero)")
            x = _random_complex(rng, n)
            x /= W.norm(x)
            continue
        best = max(best, ny)
        x = z / nz
        it += 1
    return float(best)


@dataclass
class FovReport:
    norm_estimate: float
    fov_min_abs: float
    probe_count: int
    optimizer_iterations: int
    hull_samples: list = field(repr=False)
    fov_certified: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hull_samples"] = [[z.real, z.imag] for z in self.hull_samples]
        return d


def fov_quotient(operator, W: Weight, v: np.ndarray, w: np.ndarray | None = None) -> complex:
    """``<M v, w>_W / <v, w>_W`` (``w = v`` gives a field-of-values point)."""
    mv, _ = _operator_pair(operator)
    w = v if w is None else w
    return W.dot(mv(v), w) / W.dot(v, w)


def sample_field_of_values(operator, W: Weight | None = None, n_random: int = 200, n_refine: int = 40,
                           seed: int = 0, n_starts: int = 4, certified: bool = False,
                           norm_iters: int = 50) -> FovReport:
    """Sample ``q(v) = <M v, v>_W / <v, v>_W`` and locally minimize ``|q|``.

    ``fov_min_abs`` is the smallest modulus found, hence an upper bound on the
    distance of the field of values from the origin. With ``certified`` (and
    ``n <= 1000``) the exact distance is also computed from the Hermitian parts
    of rotated copies of the operator.
    """
    if n_random < 1:
        raise ValueError("n_random must be positive")
    W = W or Weight()
    mv, rmv = _operator_pair(operator)
    n = operator.shape[0]
    rng = np.random.default_rng(seed)
    samples, starts = [], []
    for _ in range(n_random):
        v = _random_complex(rng, n)
        v /= W.norm(v)
        q = W.dot(mv(v), v)
        samples.append(q)
        starts.append((abs(q), v))
    starts.sort(key=lambda t: t[0])
    opt_iters = 0
    for _, v in starts[:n_starts]:
        v, path, used = _minimize_modulus(mv, rmv, W, v, n_refine)
        samples.extend(path)
        opt_iters += used
    mods = np.abs(samples)
    norm = estimate_weighted_norm(operator, W, norm_iters, seed)
    norm = max(norm, float(mods.max()))  # every |q(v)| is itself a lower bound for the norm
    cert = None
    if certified:
        cert = certified_fov_distance(operator, W)
    return FovReport(
        norm_estimate=norm,
        fov_min_abs=float(mods.min()),
        probe_count=n_random,
        optimizer_iterations=opt_iters,
        hull_samples=[complex(z) for z in samples],
        fov_certified=cert,
    )


def _minimize_modulus(mv, rmv, W: Weight, v, n_steps):
    """Projected gradient descent of ``|q(v)|^2`` on the ``W``-unit sphere."""
    path = []
    Mv = mv(v)
    q = W.dot(Mv, v)
    f = abs(q) ** 2
    t = 1.0
    used = 0
    for _ in range(n_steps):
        Msv = W.apply_inverse(rmv(W.apply(v)))
        g = np.conj(q) * Mv + q * Msv - 2 * abs(q) ** 2 * v
        g = g - W.dot(g, v) * v
        gn = W.norm(g)
        if gn < 1e-14 * max(abs(q), 1e-300):
            break
        improved = False
        for _ in range(20):
            cand = v - (t / gn) * g * max(abs(q), 1e-300)
            cand /= W.norm(cand)
            Mc = mv(cand)
            qc = W.dot(Mc, cand)
            used += 1
            path.append(qc)
            if abs(qc) ** 2 < f:
                v, Mv, q, f = cand, Mc, qc, abs(qc) ** 2
                t = min(2 * t, 1.0)
                improved = True
                break
            t *= 0.5
        if not improved:
            break
    return v, path, used


def _dense_operator(operator) -> np.ndarray:
    mv, _ = _operator_pair(operator)
    n = operator.shape[0]
    return np.column_stack([mv(e) for e in np.eye(n, dtype=complex)])


def certified_fov_distance(operator, W: Weight | None = None, n_angles: int = 120) -> float:
    """Distance of the ``W``-field of values from 0 via ``max_theta lambda_min(Re(e^{-i theta} M))``.

    Dense; intended for ``n <= 1000``. Returns 0 when the origin lies in the
    (closed) field of values.
    """
    W = W or Weight()
    n = operator.shape[0]
    if n > 1000:
        raise ValueError("certified field-of-values distance is limited to n <= 1000")
    M = _dense_operator(operator)
    Wd = np.eye(n) if W.is_identity else W.dense()
    Lc = np.linalg.cholesky(0.5 * (Wd + Wd.conj().T))  # W = L L^H
    Mt = Lc.conj().T @ M @ np.linalg.inv(Lc.conj().T)

    def support(theta):
        R = np.exp(-1j * theta) * Mt
        return np.linalg.eigvalsh(0.5 * (R + R.conj().T))[0]

    thetas = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    vals = np.array([support(t) for t in thetas])
    i = int(np.argmax(vals))
    lo, hi = thetas[i] - 2 * np.pi / n_angles, thetas[i] + 2 * np.pi / n_angles
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda t: -support(t), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return float(max(vals[i], -res.fun, 0.0))


# ---------------------------------------------------------------------------
# projection-operator oracle


class ProjectionOracle:
    """Galerkin projections ``Q_l`` computed from their defining variational problems.

    Functions are represented by their values and gradients at the fine
    quadrature points; the forms are integrated directly from the
    coefficients, and the subspace bases are rebuilt from the cover's element
    sets and the coarse mesh by point evaluation. ``adjoint=True`` uses the
    adjoint form ``a*(u, w) = conj(a(w, u))``.
    """

    def __init__(self, problem: HelmholtzProblem, adjoint: bool = False):
        space = problem.space
        coeff = problem.coeff
        self.space = space
        self.k = coeff.k
        blocks = list(quadrature_blocks(space, chunk=10**9))
        blk = blocks[0]
        x, y = blk.x.ravel(), blk.y.ravel()
        self.wt = blk.w.ravel()
        pts = np.column_stack([x, y])
        Aq = coeff.a_scat(x, y)
        sign = -1.0 if adjoint else 1.0
        self.alpha = coeff.c_scat(x, y) ** -2.0 + 1j * sign * coeff.V(x, y)
        self.Aw = Aq * self.wt[:, None, None]
        Phi, Px, Py = basis_at_points(space, pts)
        idx = space.interior_dofs
        self.fine = (Phi[:, idx].tocsc(), Px[:, idx].tocsc(), Py[:, idx].tocsc())
        self.local_bases = []
        if problem.cover is not None:
            nt = space.mesh.n_triangles
            for elems in problem.cover.subdomains:
                inside = np.zeros(nt, dtype=bool)
                inside[elems] = True
                ok = np.ones(space.n_dofs, dtype=bool)
                ok[space.element_dofs[~inside].ravel()] = False
                touched = np.zeros(space.n_dofs, dtype=bool)
                touched[space.element_dofs[inside].ravel()] = True
                sel = np.flatnonzero((ok & touched)[idx])
                self.local_bases.append(tuple(m[:, sel].toarray() for m in self.fine))
        self.coarse_basis = None
        if problem.coarse is not None:
            cs = problem.coarse.coarse
            if problem.coarse.mode == "nested":
                C, Cx, Cy = basis_at_points(cs, pts)
                cidx = cs.interior_dofs
                self.coarse_basis = tuple(m[:, cidx].toarray() for m in (C, Cx, Cy))
            else:
                # fine nodal interpolants of the coarse basis functions
                Cd, _, _ = basis_at_points(cs, space.dof_coords)
                coeffs = Cd[:, cs.interior_dofs].toarray()[idx]
                self.coarse_basis = tuple(m @ coeffs for m in self.fine)

    def sample(self, V: np.ndarray):
        """Values and gradients of the FE function with interior coefficients ``V``."""
        return tuple(np.asarray(m @ V) for m in self.fine)

    def _form(self, U, Wf, mass):
        u, ux, uy = U
        w, wx, wy = Wf
        k2 = self.k**-2
        Aw = self.Aw
        grad_u = (Aw[:, 0, 0, None] * ux + Aw[:, 0, 1, None] * uy, Aw[:, 1, 0, None] * ux + Aw[:, 1, 1, None] * uy) \
            if ux.ndim == 2 else (Aw[:, 0, 0] * ux + Aw[:, 0, 1] * uy, Aw[:, 1, 0] * ux + Aw[:, 1, 1] * uy)
        wm = (self.wt * mass)[:, None] if u.ndim == 2 else self.wt * mass
        return k2 * (wx.conj().T @ grad_u[0] + wy.conj().T @ grad_u[1]) + w.conj().T @ (wm * u)

    def a(self, U, Wf):
        """``a(u, w)`` (matrix ``[a(u_j, w_i)]`` for sets of functions)."""
        return self._form(U, Wf, -self.alpha)

    def h1k(self, U, Wf):
        return self._form(U, Wf, np.ones_like(self.wt))

    def l2(self, U, Wf):
        u, w = U[0], Wf[0]
        wm = self.wt[:, None] if u.ndim == 2 else self.wt
        return w.conj().T @ (wm * u)

    def project(self, basis, U):
        """Galerkin projection onto ``span(basis)``: ``a(Q u, s) = a(u, s)`` for all ``s``."""
        if basis is None or basis[0].shape[1] == 0:
            return tuple(np.zeros_like(c) for c in U)
        G = self.a(basis, basis)
        rhs = self.a(U, basis)
        c = np.linalg.solve(G, rhs)
        return tuple(b @ c for b in basis)

    def Q0(self, U):
        return self.project(self.coarse_basis, U)

    def Q_sum_local(self, U):
        out = tuple(np.zeros_like(c) for c in U)
        for basis in self.local_bases:
            out = tuple(o + q for o, q in zip(out, self.project(basis, U)))
        return out

    def pairing(self, variant: str, V: np.ndarray, Wv: np.ndarray) -> complex:
        """``(Q v, w)_{H^1_k}`` for the additive or hybrid projection sum."""
        v, w = self.sample(V), self.sample(Wv)
        q0v = self.Q0(v)
        if variant == "additive":
            qv = tuple(a + b for a, b in zip(q0v, self.Q_sum_local(v)))
            return complex(self.h1k(qv, w))
        r = tuple(a - b for a, b in zip(v, q0v))
        s = self.Q_sum_local(r)
        q0w = self.Q0(w)
        wr = tuple(a - b for a, b in zip(w, q0w))
        return complex(self.h1k(q0v, w) + self.h1k(s, wr))


def verify_repq_identity(problem: HelmholtzProblem, preconditioner: SchwarzPreconditioner,
                         n_probes: int = 20, seed: int = 0) -> float:
    """Max over probes of ``|<B^-1 A V, W>_D - (Q v, w)_{H^1_k}| / (||v|| ||w||)``.

    For ``hybrid_right`` the matrix side is ``<A B^-1 X, Y>_{D^-1}`` with
    ``X = D V``, ``Y = D W``, compared with ``conj((Q* w, v))`` where ``Q*`` is
    the hybrid sum built from the adjoint form.
    """
    if problem.space.n_interior > 2000:
        raise ValueError("the projection oracle is dense; use a problem with n_interior <= 2000")
    variant = preconditioner.variant
    oracle = ProjectionOracle(problem, adjoint=(variant == "hybrid_right"))
    D = preconditioner.D_k
    n = preconditioner.n
    rng = np.random.default_rng(seed)
    worst = 0.0
    if variant == "hybrid_right":
        op = ProjectedOperator(preconditioner, "right")
    else:
        op = ProjectedOperator(preconditioner, "left")
    for _ in range(n_probes):
        V = _random_complex(rng, n)
        Wv = _random_complex(rng, n)
        scale = np.sqrt(np.vdot(V, D @ V).real * np.vdot(Wv, D @ Wv).real)
        if variant == "hybrid_right":
            X, Y = D @ V, D @ Wv
            lhs = op.weight.dot(op.matvec(X), Y)
            rhs = np.conj(oracle.pairing("hybrid", Wv, V))
        else:
            lhs = op.weight.dot(op.matvec(V), Wv)
            rhs = oracle.pairing("additive" if variant == "additive" else "hybrid", V, Wv)
        worst = max(worst, abs(lhs - rhs) / scale)
    return float(worst)


def verify_adjoint_fov(problem: HelmholtzProblem, n_probes: int = 20, seed: int = 0) -> float:
    """Compare field-of-values points of the left hybrid operator built on ``A^H`` with
    those of the right hybrid operator built on ``A``.

    For a probe ``V`` and ``W = D V``, the quotient of ``B_L(A^H) A^H`` at ``V``
    in the ``D`` product is the complex conjugate of the quotient of
    ``A B_R(A)`` at ``W`` in the ``D^-1`` product. Returns the largest
    ``|q_R - conj(q_L)| / max(1, |q_L|)`` over the probes.
    """
    S = problem.system
    right = setup(S.A, S.D_k, problem.R0, problem.local, "hybrid_right", fact_Dk=S.factor_D())
    left = setup(S.A.conj().T, S.D_k, problem.R0, problem.local, "hybrid_left", fact_Dk=S.factor_D())
    op_r, op_l = ProjectedOperator(right, "right"), ProjectedOperator(left, "left")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        V = _random_complex(rng, S.n)
        W = S.D_k @ V
        qL = fov_quotient(op_l, op_l.weight, V)
        qR = fov_quotient(op_r, op_r.weight, W)
        worst = max(worst, abs(qR - np.conj(qL)) / max(1.0, abs(qL)))
    return float(worst)


# ---------------------------------------------------------------------------
# stable splittings


def splitting_E(k: float, L: float, h: float, p: int) -> float:
    """``E = (kL)^-5 (p^3 / (k h) + p^2)``."""
    return float((k * L) ** -5 * (p**3 / (k * h) + p**2))


@dataclass
class SplittingReport:
    level: str
    mode: str
    reconstruction_error: float
    localization_defect: float
    splitting_constant: float
    splitting_constant_scaled: float
    localization_leak: float
    decay_rate_q: float
    E: float
    v_l2: float
    v_h1k: float

    def to_dict(self) -> dict:
        return asdict(self)


def _l2_mass_factor(problem: HelmholtzProblem) -> SpdFactorization:
    return problem.system.factor_M()


def local_interior_sets(problem: HelmholtzProblem) -> list[np.ndarray]:
    return list(problem.local.indices)


def verify_stable_splitting(problem: HelmholtzProblem, v: np.ndarray, level: str = "one",
                            mode: str = "defect") -> SplittingReport:
    """Build the splitting ``v = (v_0 +) sum_l v_l`` and measure its energy.

    One level: ``vt_l = Pi_L2(chi_l v)``, then ``v_l`` interpolates
    ``(1 - psi_l) vt_l`` at the dofs interior to ``Omega_l``, where ``psi_l``
    is the P1 function equal to one at the vertices of the interior boundary
    of ``Omega_l``. Two levels: ``v_0`` is the P1 coarse Clement
    interpolant (patch means) and the remainder is split on one level.
    ``mode='exact'`` adds the leftover defect to the lowest-index subdomain
    owning each dof.
    """
    if level not in ("one", "two"):
        raise ValueError("level must be 'one' or 'two'")
    if mode not in ("defect", "exact"):
        raise ValueError("mode must be 'defect' or 'exact'")
    pou, cover = problem.pou, problem.cover
    if pou is None or cover is None:
        raise ValueError("problem has no subdomain cover")
    if not pou.check_support():
        raise ValueError("partition of unity support comes closer than delta_l to the subdomain boundary")
    space = problem.space
    mesh = space.mesh
    S = problem.system
    D, M = S.D_k, S.M
    p = space.degree
    k = problem.k
    v = np.asarray(v, dtype=complex)

    def nrm(x, G):
        return float(np.sqrt(max(np.vdot(x, G @ x).real, 0.0)))

    v0 = np.zeros_like(v)
    H_coa = None
    if level == "two":
        if problem.coarse is None:
            raise ValueError("two-level splitting needs a coarse mesh")
        v0, H_coa = clement_coarse(problem, v)
    target = v - v0

    order = 2 * p + 2
    P1 = build_space(mesh, 1)
    target_q = quadrature_values(space, space.extend(target), order)
    fM = _l2_mass_factor(problem)
    chi_dofs = pou_on_space(pou, space)
    vt = []
    for ell in range(cover.n_sub):
        chi_q = quadrature_values(P1, pou.chi[ell], order)
        vt.append(fM.solve(load_vector(space, chi_q * target_q, order)))
    recon = nrm(sum(vt) - target, M)

    # interior-boundary vertices of each subdomain and the localization
    nt = mesh.n_triangles
    interior_pos = space.interior_index
    parts = []
    leak_sq = 0.0
    psi_vals = []
    for ell, elems in enumerate(cover.subdomains):
        inside = np.zeros(nt, dtype=bool)
        inside[elems] = True
        vin = np.zeros(mesh.n_vertices, dtype=bool)
        vin[mesh.triangles[inside].ravel()] = True
        vout = np.zeros(mesh.n_vertices, dtype=bool)
        vout[mesh.triangles[~inside].ravel()] = True
        psi = (vin & vout).astype(float)
        psi[mesh.boundary_vertices] = 0.0
        psi_dof = _p1_on_space(space, psi)[space.interior_dofs]
        psi_vals.append(psi_dof)
        idx = problem.local.indices[ell]
        part = np.zeros_like(v)
        part[idx] = (1.0 - psi_dof[idx]) * vt[ell][idx]
        parts.append(part)
        outside_elems = np.flatnonzero(~inside)
        if len(outside_elems):
            leak_sq += element_l2_sq(space, space.extend(vt[ell]), outside_elems).sum()
    defect_vec = target - sum(parts)
    defect = nrm(defect_vec, M)
    if mode == "exact":
        owner = -np.ones(len(v), dtype=np.int64)
        for ell in reversed(range(cover.n_sub)):
            owner[problem.local.indices[ell]] = ell
        if np.any(owner < 0):
            raise ValueError("some interior dof lies in no subdomain interior")
        for ell in range(cover.n_sub):
            sel = owner == ell
            parts[ell][sel] += defect_vec[sel]
        defect = nrm(target - sum(parts), M)

    E = splitting_E(k, mesh.side_length, mesh.cell_size, p)
    energy = sum(nrm(x, D) ** 2 for x in parts)
    vh, vl = nrm(v, D), nrm(v, M)
    if level == "one":
        denom = vh**2 + ((k * cover.delta) ** -2 + E**2) * vl**2
    else:
        energy += nrm(v0, D) ** 2
        denom = (1 + (H_coa / cover.delta) ** 2 + (k * H_coa) ** 2 * E**2) * vh**2
    const = energy / denom
    q = _splitting_decay(problem, vt, chi_dofs)
    return SplittingReport(
        level=level,
        mode=mode,
        reconstruction_error=recon,
        localization_defect=defect,
        splitting_constant=float(const),
        splitting_constant_scaled=float(const / (p**4 * cover.Lambda)),
        localization_leak=float(np.sqrt(leak_sq)),
        decay_rate_q=q,
        E=E,
        v_l2=vl,
        v_h1k=vh,
    )


def _p1_on_space(space: FeSpace, vertex_values: np.ndarray) -> np.ndarray:
    from .fespace import lattice

    nodes = lattice(space.degree)
    bary = np.column_stack([1.0 - nodes.sum(axis=1), nodes])
    out = np.empty(space.n_dofs)
    vals = vertex_values[space.mesh.triangles]  # (nt, 3)
    out[space.element_dofs.ravel()] = (vals @ bary.T).ravel()
    return out


def clement_coarse(problem: HelmholtzProblem, v: np.ndarray):
    """P1 coarse quasi-interpolant: value at each interior coarse vertex = mean of ``v`` on its patch.

    Returns the fine interior coefficients of ``v_0`` and the coarse mesh width.
    """
    space = problem.space
    cmesh = problem.coarse.coarse.mesh
    c1 = build_space(cmesh, 1)
    anc = space.mesh.ancestor_map(cmesh)
    vq = quadrature_values(space, space.extend(v))
    wq = np.concatenate([b.w for b in quadrature_blocks(space)])
    integral = (vq * wq).sum(axis=1)  # per fine element
    area = wq.sum(axis=1)
    nv = cmesh.n_vertices
    tri = cmesh.triangles[anc]  # coarse vertices of each fine element's ancestor
    num = np.zeros(nv, dtype=complex)
    den = np.zeros(nv)
    for i in range(3):
        np.add.at(num, tri[:, i], integral)
        np.add.at(den, tri[:, i], area)
    coarse_vals = num / den
    coarse_vals[cmesh.boundary_vertices] = 0.0
    P = coarse_basis_at(space, c1, space.interior_dofs)  # (coarse dofs, fine interior)
    v0 = P.T @ coarse_vals
    H_coa = float(cmesh.h_max)
    return v0, H_coa


def element_l2_sq(space: FeSpace, coeffs_full: np.ndarray, elements: np.ndarray | None = None) -> np.ndarray:
    """``||u||^2_{L2(tau)}`` for each listed element."""
    out = []
    for blk in quadrature_blocks(space, elements=elements):
        vals = np.einsum("qb,eb->eq", blk.phi, coeffs_full[blk.dofs])
        out.append((blk.w * np.abs(vals) ** 2).sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def element_layers(mesh, source_elements: np.ndarray) -> np.ndarray:
    """Element-layer distance from a patch: 0 inside, ``1 + min vertex distance`` outside.

    Vertex distances are shortest paths in the vertex graph from the patch's vertices.
    """
    from scipy.sparse.csgraph import dijkstra

    src = np.unique(mesh.triangles[source_elements].ravel())
    d = dijkstra(vertex_graph(mesh), directed=False, indices=src, unweighted=True, min_only=True)
    layers = 1 + d[mesh.triangles].min(axis=1)
    layers[source_elements] = 0
    return layers.astype(np.int64)


def _fit_decay(layer_norms: np.ndarray, floor: float, first: int = 1) -> tuple[float, np.ndarray]:
    peak = layer_norms.max()
    use = np.arange(first, len(layer_norms))
    use = use[layer_norms[use] > floor * peak]
    if len(use) < 3:
        return float("nan"), use
    slope = np.polyfit(use, np.log(layer_norms[use]), 1)[0]
    return float(np.exp(slope)), use


def _splitting_decay(problem: HelmholtzProblem, vt: list[np.ndarray], chi_dofs: np.ndarray) -> float:
    """Per-layer decay of ``vt_l`` away from ``supp chi_l``, fitted on the first subdomain with room."""
    space = problem.space
    mesh = space.mesh
    for ell, x in enumerate(vt):
        supp = np.flatnonzero((problem.pou.chi[ell][mesh.triangles] > 0).any(axis=1))
        layers = element_layers(mesh, supp)
        if layers.max() < 4:
            continue
        e2 = element_l2_sq(space, space.extend(x))
        prof = np.sqrt(np.bincount(layers, weights=e2))
        q, _ = _fit_decay(prof, 1e-12)
        if np.isfinite(q):
            return q
    return float("nan")


@dataclass
class DecayReport:
    q: float
    layer_norms: list
    fitted_layers: list

    def to_dict(self) -> dict:
        return asdict(self)


def measure_l2_projection_decay(space: FeSpace, source_patch: np.ndarray, min_layers: int = 12,
                                floor: float = 1e-12, g: np.ndarray | None = None) -> DecayReport:
    """Project the indicator of ``source_patch`` (or the quadrature samples ``g``) onto the
    space and fit ``log ||Pi g||_{L2(layer j)}`` linearly in ``j``; ``q = exp(slope)``.

    Layers with norm below ``floor`` times the largest layer are left out of the fit.
    """
    source_patch = np.asarray(source_patch)
    layers = element_layers(space.mesh, source_patch)
    if layers.max() < min_layers:
        raise ValueError(f"insufficient layers: {layers.max()} beyond the patch, need >= {min_layers}")
    if g is None:
        blocks = list(quadrature_blocks(space))
        nq = blocks[0].w.shape[1]
        g = np.zeros((space.mesh.n_triangles, nq))
        g[source_patch] = 1.0
    M = assemble_forms(space, _unit_coeff(space), interior=True)["M"]
    u = SpdFactorization(M).solve(load_vector(space, g))
    e2 = element_l2_sq(space, space.extend(u))
    prof = np.sqrt(np.bincount(layers, weights=e2))
    q, used = _fit_decay(prof, floor)
    return DecayReport(q=q, layer_norms=prof.tolist(), fitted_layers=used.tolist())


def _unit_coeff(space: FeSpace):
    from .assembly import CapCoefficients

    return CapCoefficients(k=1.0, L=space.mesh.side_length)


# ---------------------------------------------------------------------------
# coarse-space approximation quality and quasi-optimality


@dataclass
class EtaReport:
    eta: float
    schatz_threshold: float
    schatz_ok: bool
    C_mu: float

    def to_dict(self) -> dict:
        return asdict(self)


def _system(obj) -> SystemMatrices:
    return obj.system if isinstance(obj, HelmholtzProblem) else obj


def estimate_eta_coarse(problem, R0, iters: int = 60, seed: int = 0) -> EtaReport:
    """``eta = ||(I - Pi_0) S*||`` from L2 to the weighted norm, by power iteration.

    ``S* f`` solves ``A^H U = M F`` (the discrete adjoint problem) and ``Pi_0``
    is the ``D_k``-orthogonal projection onto the range of ``R0^T``.
    """
    system = _system(problem)
    if system.n > 5000:
        raise ValueError("eta estimation is limited to n_interior <= 5000")
    A, D, M = system.A, system.D_k, system.M
    fA = system.factor_A()
    R0 = None if R0 is None else sp.csr_matrix(R0)
    if R0 is not None:
        G0 = Factorization(R0 @ D @ R0.T)

    def proj_c(U):
        if R0 is None:
            return U
        return U - R0.T @ G0.solve(R0 @ (D @ U))

    rng = np.random.default_rng(seed)
    f = _random_complex(rng, system.n)
    mnorm = lambda x: float(np.sqrt(max(np.vdot(x, M @ x).real, 0.0)))  # noqa: E731
    dnorm = lambda x: float(np.sqrt(max(np.vdot(x, D @ x).real, 0.0)))  # noqa: E731
    f /= mnorm(f)
    eta = 0.0
    for _ in range(iters):
        g = proj_c(fA.solve(M @ f, adjoint=True))
        ng = dnorm(g)
        eta = max(eta, ng)
        z = fA.solve(D @ g)
        nz = mnorm(z)
        if nz == 0:
            break
        f = z / nz
    C = system.C_mu
    thr = (2 * C) ** -0.5 / (1 + C)
    return EtaReport(eta=float(eta), schatz_threshold=float(thr), schatz_ok=bool(eta <= thr), C_mu=float(C))


@dataclass
class QuasiOptimalityReport:
    error_ratio: float
    l2_over_h1k: float
    error_h1k: float
    best_h1k: float
    kh: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_quasi_optimality(problem, reference_space: FeSpace, f=None,
                           reference: SystemMatrices | None = None) -> QuasiOptimalityReport:
    """Galerkin error against a finer reference solution, relative to the best approximation.

    The reference is solved on ``reference_space`` (same degree, nested
    refinement); the coarse load is the restriction ``P^T F_ref`` of the
    reference load, with ``P`` the nested prolongation. ``f`` defaults to a
    Gaussian bump of width ``2/k``. When the reference lies in the coarse
    space (best error below 1e-12 relative) the ratio is 1 if the Galerkin
    error is also negligible and ``inf`` otherwise.
    """
    system = _system(problem)
    space = system.space
    if reference_space.degree != space.degree:
        raise ValueError("reference space must have the same degree")
    k = system.coeff.k
    if f is None:
        from .problem import rhs_field

        f = rhs_field("gaussian_bump", k, system.coeff.L)
    if reference is None:
        reference = assemble_cap(reference_space, system.coeff)
    P = build_coarse_space(reference_space, space, "nested").R0.T.tocsr()
    F_ref = load_vector(reference_space, f) if callable(f) else np.asarray(f)
    try:
        u_ref = reference.factor_A().solve(F_ref)
    except Exception as exc:
        raise RuntimeError(f"reference solve failed: {exc}") from exc
    u_h = system.factor_A().solve(P.T @ F_ref)
    D, M = reference.D_k, reference.M
    e = u_ref - P @ u_h
    Gc = SpdFactorization((P.T @ D @ P).real)
    c = Gc.solve(P.T @ (D @ u_ref))
    b = u_ref - P @ c
    dn = lambda x: float(np.sqrt(max(np.vdot(x, D @ x).real, 0.0)))  # noqa: E731
    mn = lambda x: float(np.sqrt(max(np.vdot(x, M @ x).real, 0.0)))  # noqa: E731
    err, best, uref = dn(e), dn(b), dn(u_ref)
    if best <= 1e-12 * uref:
        ratio = 1.0 if err <= 1e-10 * uref else float("inf")
    else:
        ratio = err / best
    return QuasiOptimalityReport(
        error_ratio=float(ratio),
        l2_over_h1k=float(mn(e) / err) if err > 0 else 0.0,
        error_h1k=err,
        best_h1k=best,
        kh=float(k * space.mesh.cell_size),
    )


# ---------------------------------------------------------------------------
# reports


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def report_json(records: dict) -> str:
    """JSON text of analysis records keyed by operation name."""
    return json.dumps(_jsonable(records), indent=2, sort_keys=True)
