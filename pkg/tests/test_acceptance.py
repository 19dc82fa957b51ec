"""Acceptance checks; each prints one PASS/FAIL line, collected again in the terminal summary."""
import numpy as np
import pytest
import scipy.sparse as sp

from helmschwarz.analysis import (
    check_quasi_optimality,
    estimate_eta_coarse,
    measure_l2_projection_decay,
    verify_adjoint_fov,
    verify_repq_identity,
    verify_stable_splitting,
)
from helmschwarz.assembly import assemble_cap, make_coefficients
from helmschwarz.decomposition import build_cover, build_pou
from helmschwarz.experiment import ExperimentConfig, run_experiment
from helmschwarz.fespace import build_space
from helmschwarz.gmres import GmresConfig, weighted_gmres
from helmschwarz.linalg import Weight
from helmschwarz.mesh import build_structured_mesh, refine_uniform
from helmschwarz.problem import build_problem

from conftest import ACCEPTANCE_LINES, random_complex

SWEEP_K = (10.0, 20.0, 40.0)


def verdict(number, title, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def sweep_runs():
    """Iteration sweep at 10 points per wavelength, coarse mesh 2h, 4x4-cell subdomains."""
    cache = {}

    def get(k):
        if k not in cache:
            cache[k] = run_experiment(ExperimentConfig(k=k, analyses=["fov"], seed=0))
        return cache[k]

    return get


def test_operator_matrix_identity():
    pb = build_problem(5.0, 8, p_f=1, p_c=1, coarse_levels=1, n_sub_per_side=2, overlap_layers=2)
    worst = {v: verify_repq_identity(pb, pb.preconditioner(v), n_probes=20, seed=7)
             for v in ("additive", "hybrid_left", "hybrid_right")}
    detail = ", ".join(f"{v}={e:.1e}" for v, e in worst.items())
    verdict(1, "projection form equals preconditioned matrix form (<= 1e-9)", max(worst.values()) <= 1e-9, detail)


def test_deflation_exactness():
    its = {}
    for v in ("hybrid_left", "hybrid_right"):
        its[v] = run_experiment(ExperimentConfig(k=10.0, coarse_levels=0, variant=v)).gmres["iterations"]
    its["additive"] = run_experiment(
        ExperimentConfig(k=10.0, coarse_levels=0, n_sub_per_side=0, variant="additive")
    ).gmres["iterations"]
    ok = its["hybrid_left"] == 1 and its["hybrid_right"] == 1 and its["additive"] <= 2
    verdict(2, "coarse space equal to fine space", ok, ", ".join(f"{v}={n}" for v, n in its.items()))


def test_adjoint_identity():
    pb = build_problem(5.0, 8, p_f=1, p_c=1, coarse_levels=1, n_sub_per_side=2, overlap_layers=2)
    worst = verify_adjoint_fov(pb, n_probes=20, seed=3)
    verdict(3, "left hybrid on the adjoint vs right hybrid FOV quotients (<= 1e-9)", worst <= 1e-9, f"max={worst:.1e}")


def _entrywise_relative(S):
    diff = (S.A - S.D_k - S.M_mu).tocoo()
    scale = (abs(S.A) + abs(S.D_k) + abs(S.M_mu)).tocsr()
    vals = np.abs(diff.data)
    den = np.asarray(scale[diff.row, diff.col]).ravel()
    return float((vals / np.where(den > 0, den, 1.0)).max()) if len(vals) else 0.0


def test_structure_identity_and_cap_sign():
    rng = np.random.default_rng(11)
    worst_rel, worst_im = 0.0, -np.inf
    for preset in ("constant", "lens"):
        for p in (1, 2, 3):
            for k in (5.0, 20.0):
                S = assemble_cap(build_space(build_structured_mesh(1.0, 6), p), make_coefficients(k, preset=preset))
                worst_rel = max(worst_rel, _entrywise_relative(S))
                for _ in range(100):
                    V = random_complex(rng, S.n)
                    worst_im = max(worst_im, np.vdot(V, S.A @ V).imag / np.vdot(V, V).real)
    ok = worst_rel <= 1e-11 and worst_im <= 1e-12
    verdict(4, "A = D_k + M_mu entrywise and Im<AV,V> <= 0", ok, f"rel={worst_rel:.1e}, max Im/|V|^2={worst_im:.1e}")


def test_partition_of_unity():
    worst_sum, worst_c, support_ok = 0.0, 0.0, True
    mesh = build_structured_mesh(1.0, 24)
    for ns, ov in ((2, 2), (2, 6), (3, 3), (4, 2), ((3, 2), 4), (6, 2)):
        pou = build_pou(mesh, build_cover(mesh, ns, ov))
        worst_sum = max(worst_sum, np.abs(pou.chi.sum(axis=0) - 1).max())
        worst_c = max(worst_c, pou.C_PoU)
        support_ok &= pou.check_support()
    ok = worst_sum <= 1e-13 and worst_c <= 4 and support_ok
    verdict(5, "partition of unity", ok, f"sum err={worst_sum:.1e}, C_PoU={worst_c:.3f}, support ok={support_ok}")


def test_one_level_splitting():
    rng = np.random.default_rng(5)
    recon, slack, ok = 0.0, 0.0, True
    # the overlap is about 0.16 at every degree
    for p, n, ov in ((1, 64, 20), (2, 32, 10), (3, 24, 8)):
        pb = build_problem(10.0, n, p_f=p, p_c=1, coarse_levels=1, n_sub_per_side=2, overlap_layers=ov)
        for _ in range(10):
            rep = verify_stable_splitting(pb, random_complex(rng, pb.system.n))
            recon = max(recon, rep.reconstruction_error / rep.v_l2)
            slack = max(slack, rep.localization_defect / (rep.E * rep.v_l2))
            ok &= rep.reconstruction_error <= 1e-10 * rep.v_l2 and rep.localization_defect <= 10 * rep.E * rep.v_l2
    verdict(6, "one-level splitting reconstruction and localization", ok,
            f"recon={recon:.1e}, max defect/(E||v||)={slack:.2e} (allowed 10)")


def test_l2_projection_decay():
    qs = {}
    for p, n in ((1, 48), (3, 28)):
        space = build_space(build_structured_mesh(1.0, n), p)
        patch = np.flatnonzero(space.mesh.centroids()[:, 0] < space.mesh.cell_size)
        qs[p] = measure_l2_projection_decay(space, patch, min_layers=24).q
    ok = all(q <= 0.9 for q in qs.values())
    verdict(7, "per-layer L2 projection decay (q <= 0.9)", ok, ", ".join(f"p={p}: q={q:.3f}" for p, q in qs.items()))


def test_eta_monotone_and_deflated():
    etas = {}
    for levels in (3, 2, 1, 0):
        pb = build_problem(10.0, 64, coarse_levels=levels, n_sub_per_side=0)
        etas[levels] = estimate_eta_coarse(pb, pb.R0, iters=40)
    seq = [etas[l].eta for l in (3, 2, 1)]
    ok = all(b <= 0.8 * a for a, b in zip(seq, seq[1:])) and etas[0].eta <= 1e-9
    detail = ", ".join(f"H=h*{2**l}: {etas[l].eta:.3g} (schatz {etas[l].schatz_ok})" for l in (3, 2, 1, 0))
    verdict(8, "eta decreases with coarse refinement, zero when coarse=fine", ok, detail)


def test_quasi_optimality_trend():
    shrink_ok, bound_ok, parts = True, True, []
    for k in (10.0, 20.0):
        quot = []
        for kh in (0.5, 0.25, 0.125):
            pb = build_problem(k, int(round(k / kh)), coarse_levels=None, n_sub_per_side=0)
            rep = check_quasi_optimality(pb, build_space(refine_uniform(pb.mesh, 2), 1))
            quot.append(rep.l2_over_h1k)
            bound_ok &= rep.error_ratio <= 5
            parts.append(f"k={k:g} kh={kh}: ratio={rep.error_ratio:.2f} l2/h1k={rep.l2_over_h1k:.3f}")
        shrink_ok &= all(b <= a / 1.5 for a, b in zip(quot, quot[1:]))
    verdict(9, "quasi-optimality ratio <= 5 and L2/H1_k quotient shrinking 1.5x", bound_ok and shrink_ok,
            "; ".join(parts))


def test_iteration_growth(sweep_runs):
    its = {k: sweep_runs(k).gmres["iterations"] for k in SWEEP_K}
    conv = all(sweep_runs(k).gmres["converged"] for k in SWEEP_K)
    ok = conv and its[40.0] <= 1.5 * its[10.0] and its[40.0] <= 100
    verdict(10, "iterations at k=40 <= 1.5x k=10 and <= 100", ok, ", ".join(f"k={k:g}: {n}" for k, n in its.items()))


def test_coarse_under_resolution(sweep_runs):
    base = sweep_runs(40.0).gmres["iterations"]
    rep = run_experiment(ExperimentConfig(k=40.0, coarse_levels=2))
    coarse = rep.gmres["iterations"]
    verdict(11, "coarse mesh at 2.5 points per wavelength at least doubles iterations", coarse >= 2 * base,
            f"H=2h: {base}, H=4h: {coarse} (converged {rep.gmres['converged']})")


def test_fov_positivity(sweep_runs):
    vals = {}
    for k in SWEEP_K:
        rep = sweep_runs(k)
        vals[k] = (rep.analyses["fov"]["fov_min_abs"], rep.analyses["fov"]["norm_estimate"], rep.summary["Lambda"])
    ok = all(f > 0.01 and nrm <= 10 * lam for f, nrm, lam in vals.values())
    ok &= vals[40.0][0] >= 0.3 * vals[10.0][0]
    detail = ", ".join(f"k={k:g}: fov_min={f:.2e} norm={nrm:.1f} (10 Lambda={10 * lam})" for k, (f, nrm, lam) in vals.items())
    verdict(12, "field of values bounded away from 0, norm <= 10 Lambda", ok, detail)


def test_weighted_gmres_oracles():
    rng = np.random.default_rng(2)
    n = 50
    M = np.eye(n) * 4 + random_complex(rng, n, n) / np.sqrt(n)
    B = rng.standard_normal((n, n))
    W = B @ B.T + n * np.eye(n)
    b = random_complex(rng, n)
    r = weighted_gmres(M, b, GmresConfig(tol=1e-12, max_iter=100, weight=Weight(sp.csr_matrix(W))))
    x = np.linalg.solve(M, b)
    sol_err = np.linalg.norm(r.solution - x) / np.linalg.norm(x)
    L = np.linalg.cholesky(W)
    r1 = weighted_gmres(M, b, GmresConfig(tol=1e-10, max_iter=60, weight=Weight(sp.csr_matrix(W))))
    r2 = weighted_gmres(L.T @ M @ np.linalg.inv(L.T), L.T @ b, GmresConfig(tol=1e-10, max_iter=60))
    m = min(len(r1.residual_history), len(r2.residual_history))
    hist_err = np.abs(np.subtract(r1.residual_history[:m], r2.residual_history[:m])).max()
    ok = r.converged and sol_err <= 1e-8 and hist_err <= 1e-8 and len(r1.residual_history) == len(r2.residual_history)
    verdict(13, "weighted GMRES: dense oracle and Cholesky equivalence", ok,
            f"solution err={sol_err:.1e}, history diff={hist_err:.1e}")
