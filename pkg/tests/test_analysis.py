import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helmschwarz.analysis import (
    ProjectionOracle,
    certified_fov_distance,
    check_quasi_optimality,
    estimate_eta_coarse,
    estimate_weighted_norm,
    fov_quotient,
    measure_l2_projection_decay,
    report_json,
    sample_field_of_values,
    splitting_E,
    verify_adjoint_fov,
    verify_repq_identity,
    verify_stable_splitting,
)
from helmschwarz.assembly import assemble_cap, quadrature_values
from helmschwarz.fespace import build_space
from helmschwarz.linalg import Weight
from helmschwarz.mesh import build_structured_mesh, refine_uniform
from helmschwarz.preconditioner import ProjectedOperator
from helmschwarz.problem import HelmholtzProblem, build_problem

from conftest import random_complex


def _spd(rng, n):
    X = random_complex(rng, n, n)
    return X @ X.conj().T + n * np.eye(n)


def _weighted_norm_oracle(M, W):
    L = np.linalg.cholesky(W)
    T = L.conj().T @ M @ np.linalg.inv(L.conj().T)
    return np.linalg.norm(T, 2)


def _segment_distance(a, b):
    d = b - a
    t = np.clip(-(np.conj(d) * a).real / abs(d) ** 2, 0.0, 1.0)
    return abs(a + t * d)


def _hull_distance(points):
    """Distance from 0 to the convex hull of points that all lie on a circle, listed by angle."""
    pts = list(points) + [points[0]]
    return min(_segment_distance(pts[i], pts[i + 1]) for i in range(len(points)))


# ---------------------------------------------------------------------------
# norms and fields of values


def test_weighted_norm_scalar_and_diagonal():
    assert estimate_weighted_norm(3.0 * np.eye(5)) == pytest.approx(3.0, rel=1e-12)
    assert estimate_weighted_norm(np.diag([1.0, 2.0]), iters=100) == pytest.approx(2.0, rel=1e-10)


def test_weighted_norm_against_dense_svd(rng):
    n = 30
    M = random_complex(rng, n, n)
    W = _spd(rng, n).real
    est = estimate_weighted_norm(M, Weight(W), iters=400, seed=3)
    exact = _weighted_norm_oracle(M, W)
    assert est <= exact * (1 + 1e-12)
    assert est == pytest.approx(exact, rel=1e-6)


def test_weighted_norm_rejects_few_iterations_and_zero_operator():
    with pytest.raises(ValueError):
        estimate_weighted_norm(np.eye(3), iters=5)
    with pytest.raises(RuntimeError, match="broke down"):
        estimate_weighted_norm(np.zeros((4, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10**6))
def test_weighted_norm_never_exceeds_true_norm(n, seed):
    rng = np.random.default_rng(seed)
    M = random_complex(rng, n, n)
    W = _spd(rng, n).real
    assert estimate_weighted_norm(M, Weight(W), iters=10, seed=seed) <= _weighted_norm_oracle(M, W) * (1 + 1e-10)


def test_fov_of_identity():
    rep = sample_field_of_values(np.eye(6), n_random=20, n_refine=5, certified=True)
    assert rep.fov_min_abs == pytest.approx(1.0, abs=1e-12)
    assert rep.norm_estimate == pytest.approx(1.0, abs=1e-12)
    assert rep.fov_certified == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(rep.hull_samples, 1.0)


def test_fov_of_normal_matrix_matches_eigenvalue_hull(rng):
    n = 20
    theta = np.sort(rng.uniform(-1.2, 1.2, n))
    lam = 2.0 + np.exp(1j * theta)
    Q, _ = np.linalg.qr(random_complex(rng, n, n))
    M = Q @ np.diag(lam) @ Q.conj().T
    dist = _hull_distance(list(lam))
    rep = sample_field_of_values(M, n_random=200, n_refine=60, certified=True, norm_iters=300)
    assert rep.fov_certified == pytest.approx(dist, abs=1e-8)
    assert dist - 1e-10 <= rep.fov_min_abs <= dist + 1e-3
    # clustered moduli slow the power iteration; it stays a lower bound
    assert np.abs(lam).max() * (1 - 1e-3) <= rep.norm_estimate <= np.abs(lam).max() * (1 + 1e-12)


def test_fov_report_invariants(toy_problem):
    op = ProjectedOperator(toy_problem.preconditioner("hybrid_left"), "left")
    rep = sample_field_of_values(op, op.weight, n_random=30, n_refine=10, seed=2)
    mods = np.abs(rep.hull_samples)
    assert rep.probe_count == 30
    assert len(rep.hull_samples) == 30 + rep.optimizer_iterations
    assert rep.fov_min_abs == pytest.approx(mods.min())
    assert mods.max() <= rep.norm_estimate * (1 + 1e-12)
    d = rep.to_dict()
    assert len(d["hull_samples"][0]) == 2


def test_fov_is_one_when_coarse_space_is_fine_space(deflated_problem):
    op = ProjectedOperator(deflated_problem.preconditioner("hybrid_left"), "left")
    rep = sample_field_of_values(op, op.weight, n_random=20, n_refine=5, certified=True)
    assert rep.fov_min_abs == pytest.approx(1.0, abs=1e-9)
    assert rep.fov_certified == pytest.approx(1.0, abs=1e-9)


def test_certified_distance_is_zero_when_origin_inside():
    M = np.diag([1.0, -1.0, 1j, -1j])
    assert certified_fov_distance(M) == 0.0


def test_certified_distance_size_limit():
    with pytest.raises(ValueError):
        certified_fov_distance(np.eye(1001))


# ---------------------------------------------------------------------------
# projection representation


@pytest.mark.parametrize("variant", ["additive", "hybrid_left", "hybrid_right"])
def test_repq_identity_toy(toy_problem, variant):
    assert verify_repq_identity(toy_problem, toy_problem.preconditioner(variant), n_probes=10) <= 1e-10


def test_repq_identity_coarse_equals_fine(deflated_problem):
    assert verify_repq_identity(deflated_problem, deflated_problem.preconditioner("hybrid_left"), n_probes=5) <= 1e-12


def test_repq_identity_higher_degree_and_lens():
    pb = build_problem(4.0, 6, p_f=2, p_c=1, coarse_levels=1, n_sub_per_side=2, overlap_layers=2, preset="lens")
    assert verify_repq_identity(pb, pb.preconditioner("hybrid_left"), n_probes=5) <= 1e-10


def test_repq_rejects_large_problems():
    pb = build_problem(5.0, 48, coarse_levels=1, n_sub_per_side=2, overlap_layers=2)
    with pytest.raises(ValueError, match="dense"):
        verify_repq_identity(pb, pb.preconditioner("additive"))


def test_projection_oracle_coarse_is_galerkin(toy_problem, rng):
    orc = ProjectionOracle(toy_problem)
    v = orc.sample(random_complex(rng, toy_problem.system.n))
    q = orc.Q0(v)
    r = tuple(a - b for a, b in zip(v, q))
    assert np.abs(orc.a(r, orc.coarse_basis)).max() <= 1e-11 * np.sqrt(abs(orc.h1k(v, v)))


def test_adjoint_fov_conjugate(toy_problem):
    assert verify_adjoint_fov(toy_problem, n_probes=10) <= 1e-9


def test_coarse_cross_term_bounded_by_absorption_constant(toy_problem, rng):
    # Galerkin orthogonality turns (e, Q0 v)_H into -(mu e, Q0 v)_L2
    S = toy_problem.system
    A, D, M = S.A.toarray(), S.D_k.toarray(), S.M.toarray()
    R0 = toy_problem.R0.toarray()
    C = R0.T @ np.linalg.solve(R0 @ A @ R0.T, R0)
    for _ in range(20):
        V = random_complex(rng, S.n)
        q = C @ A @ V
        e = V - q
        lhs = abs(np.vdot(q, D @ e))
        mq, me = np.sqrt(np.vdot(q, M @ q).real), np.sqrt(np.vdot(e, M @ e).real)
        assert lhs <= S.C_mu * mq * me * (1 + 1e-10)


def test_garding_on_field_of_values(toy_problem, rng):
    S = toy_problem.system
    W = Weight(S.D_k)
    for _ in range(50):
        V = random_complex(rng, S.n)
        d = W.dot(V, V).real
        q = fov_quotient(S.A, Weight(), V) * np.vdot(V, V).real / d
        m = np.vdot(V, S.M @ V).real / d
        assert q.real >= 1 - S.C_mu * m - 1e-12


# ---------------------------------------------------------------------------
# splittings and decay


def test_splitting_single_subdomain_is_exact(rng):
    pb = build_problem(5.0, 8, coarse_levels=1, n_sub_per_side=1, overlap_layers=2)
    v = random_complex(rng, pb.system.n)
    rep = verify_stable_splitting(pb, v)
    assert rep.reconstruction_error <= 1e-12 * rep.v_l2
    assert rep.localization_defect <= 1e-12 * rep.v_l2
    assert rep.localization_leak <= 1e-12 * rep.v_l2


@pytest.mark.parametrize("level", ["one", "two"])
def test_splitting_reconstruction_and_exact_mode(toy_problem, rng, level):
    v = random_complex(rng, toy_problem.system.n)
    rep = verify_stable_splitting(toy_problem, v, level=level)
    assert rep.reconstruction_error <= 1e-11 * rep.v_l2
    ex = verify_stable_splitting(toy_problem, v, level=level, mode="exact")
    assert ex.localization_defect <= 1e-12 * ex.v_l2
    assert np.isfinite(ex.splitting_constant) and ex.splitting_constant > 0
    assert ex.splitting_constant_scaled == pytest.approx(ex.splitting_constant / toy_problem.cover.Lambda)


def test_splitting_rejects_bad_arguments(toy_problem, deflated_problem):
    v = np.ones(toy_problem.system.n, dtype=complex)
    with pytest.raises(ValueError):
        verify_stable_splitting(toy_problem, v, level="three")
    with pytest.raises(ValueError):
        verify_stable_splitting(toy_problem, v, mode="loose")
    bare = HelmholtzProblem(system=toy_problem.system)
    with pytest.raises(ValueError, match="cover"):
        verify_stable_splitting(bare, v)
    nocoarse = HelmholtzProblem(system=toy_problem.system, cover=toy_problem.cover, pou=toy_problem.pou,
                                local=toy_problem.local)
    with pytest.raises(ValueError, match="coarse"):
        verify_stable_splitting(nocoarse, v, level="two")


def test_splitting_E_formula():
    assert splitting_E(10.0, 1.0, 0.1, 1) == pytest.approx(1e-5 * (1.0 + 1.0))
    assert splitting_E(2.0, 2.0, 0.25, 3) == pytest.approx(4.0**-5 * (27 / 0.5 + 9))


def _left_strip(mesh, cells):
    return np.flatnonzero(mesh.centroids()[:, 0] < cells * mesh.cell_size)


def test_decay_rate_is_geometric():
    space = build_space(refine_uniform(build_structured_mesh(1.0, 24), 1), 1)
    rep = measure_l2_projection_decay(space, _left_strip(space.mesh, 2))
    assert 0.0 < rep.q < 0.5
    prof = np.array(rep.layer_norms)
    assert np.all(np.diff(prof[1:14]) < 0)


def test_decay_insufficient_layers():
    space = build_space(build_structured_mesh(1.0, 6), 1)
    with pytest.raises(ValueError, match="insufficient layers"):
        measure_l2_projection_decay(space, _left_strip(space.mesh, 2))


def test_decay_of_patch_supported_fe_function(rng):
    # the projection of an FE function supported in the patch is the function itself
    space = build_space(build_structured_mesh(1.0, 20), 2)
    patch = _left_strip(space.mesh, 4)
    inside = np.zeros(space.mesh.n_triangles, dtype=bool)
    inside[patch] = True
    ok = np.ones(space.n_dofs, dtype=bool)
    ok[space.element_dofs[~inside].ravel()] = False
    ok[space.boundary_dofs] = False
    u = np.where(ok, random_complex(rng, space.n_dofs), 0.0)
    g = quadrature_values(space, u)
    rep = measure_l2_projection_decay(space, patch, g=g)
    prof = np.array(rep.layer_norms)
    assert np.all(prof[1:] <= 1e-10 * prof[0])
    assert np.isnan(rep.q)


# ---------------------------------------------------------------------------
# coarse approximation and quasi-optimality


def test_eta_vanishes_when_coarse_is_fine(deflated_problem):
    rep = estimate_eta_coarse(deflated_problem, deflated_problem.R0, iters=10)
    assert rep.eta <= 1e-10
    assert rep.schatz_ok
    C = rep.C_mu
    assert rep.schatz_threshold == pytest.approx((2 * C) ** -0.5 / (1 + C))


def test_eta_without_coarse_space_is_adjoint_solution_norm(toy_problem):
    # with no projection eta is the L2 -> weighted norm of the discrete adjoint solution operator
    S = toy_problem.system
    A, D, M = S.A.toarray(), S.D_k.toarray(), S.M.toarray()
    T = np.linalg.solve(A.conj().T, M)
    Ld, Lm = np.linalg.cholesky(D), np.linalg.cholesky(M)
    exact = np.linalg.norm(Ld.conj().T @ T @ np.linalg.inv(Lm.conj().T), 2)
    rep = estimate_eta_coarse(S, None, iters=200)
    assert rep.eta == pytest.approx(exact, rel=1e-6)


def test_eta_decreases_with_coarse_refinement():
    etas = []
    for levels in (2, 1):
        pb = build_problem(5.0, 16, coarse_levels=levels, n_sub_per_side=0)
        etas.append(estimate_eta_coarse(pb, pb.R0, iters=30).eta)
    assert etas[1] < etas[0]


def test_quasi_optimality_manufactured_discrete_solution(rng):
    pb = build_problem(3.0, 6, coarse_levels=None, n_sub_per_side=0, V0=0.0)
    ref_space = build_space(refine_uniform(pb.mesh, 1), 1)
    ref = assemble_cap(ref_space, pb.coeff)
    from helmschwarz.decomposition import build_coarse_space

    P = build_coarse_space(ref_space, pb.space, "nested").R0.T
    u_h = random_complex(rng, pb.system.n)
    F_ref = ref.A @ (P @ u_h)
    rep = check_quasi_optimality(pb, ref_space, f=F_ref, reference=ref)
    assert rep.error_ratio <= 1 + 1e-8
    assert rep.error_h1k <= 1e-9 * np.sqrt(np.vdot(u_h, pb.system.D_k @ u_h).real)


def test_quasi_optimality_ratio_at_least_one():
    pb = build_problem(4.0, 8, coarse_levels=None, n_sub_per_side=0)
    ref_space = build_space(refine_uniform(pb.mesh, 2), 1)
    rep = check_quasi_optimality(pb, ref_space)
    assert rep.error_ratio >= 1 - 1e-12
    assert rep.best_h1k <= rep.error_h1k * (1 + 1e-12)
    assert rep.kh == pytest.approx(4.0 / 8)


def test_quasi_optimality_rejects_degree_mismatch():
    pb = build_problem(4.0, 4, coarse_levels=None, n_sub_per_side=0)
    with pytest.raises(ValueError):
        check_quasi_optimality(pb, build_space(refine_uniform(pb.mesh, 1), 2))


def test_report_json_handles_numpy_and_non_finite(toy_problem):
    rep = estimate_eta_coarse(toy_problem, toy_problem.R0, iters=10)
    text = report_json({"eta": rep, "arr": np.arange(3), "z": 1 + 2j, "bad": float("nan"), "flag": np.bool_(True)})
    data = json.loads(text)
    assert data["eta"]["eta"] == pytest.approx(rep.eta)
    assert data["arr"] == [0, 1, 2]
    assert data["z"] == [1.0, 2.0]
    assert data["bad"] == "nan"
    assert data["flag"] is True
