import numpy as np
import pytest
import scipy.sparse as sp

from helmschwarz.assembly import (
    CapCoefficients,
    assemble_cap,
    assemble_forms,
    assemble_rhs,
    l2_project,
    load_vector,
    make_coefficients,
)
from helmschwarz.fespace import build_space, nodal_interpolate
from helmschwarz.mesh import build_structured_mesh

from conftest import random_complex


def _system(n=6, p=1, k=4.0, preset="constant", V0=1.0):
    return assemble_cap(build_space(build_structured_mesh(1.0, n), p), make_coefficients(k, preset=preset, V0=V0))


def test_cap_profile():
    c = make_coefficients(10.0)
    r = np.linspace(0, c.R1, 50)
    assert np.all(c.V(0.5 + r / np.sqrt(2), 0.5 + r / np.sqrt(2)) == 0)
    x = np.random.default_rng(0).random((2, 500))
    assert np.all(c.V(*x) >= 0)
    assert np.isclose(c.V(0.0, 0.0), c.V0)
    assert c.positive_near_boundary(1.0 / 16)
    assert np.isclose(c.C_mu, np.sqrt(5.0))


def test_cap_validation():
    with pytest.raises(ValueError):
        CapCoefficients(k=-1.0)
    with pytest.raises(ValueError):
        CapCoefficients(k=1.0, R1=0.9)
    with pytest.raises(ValueError, match="preset"):
        make_coefficients(1.0, preset="glass")


def test_stiffness_reduction_k1_n2():
    # one interior vertex at (1/2, 1/2): P1 stiffness 4, mass h^2/2 for the 6-triangle star
    S = assemble_cap(build_space(build_structured_mesh(1.0, 2), 1), CapCoefficients(k=1.0, V0=0.0))
    assert np.isclose(S.K[0, 0], 4.0)
    assert np.isclose(S.M[0, 0], 0.25 / 2)
    assert np.allclose((S.A - (S.K - S.M)).toarray(), 0)


@pytest.mark.parametrize("preset,p", [("constant", 1), ("lens", 2), ("lens", 3)])
def test_structure_identity(preset, p):
    S = _system(n=5, p=p, k=7.0, preset=preset)
    diff = abs(S.A - S.D_k - S.M_mu)
    assert diff.max() <= 1e-11 * abs(S.A).max()


@pytest.mark.parametrize("preset", ["constant", "lens"])
def test_cap_sign_and_garding(preset, rng):
    S = _system(n=6, p=2, k=6.0, preset=preset)
    for _ in range(100):
        v = random_complex(rng, S.n)
        Av = np.vdot(v, S.A @ v)
        assert Av.imag <= 1e-12 * np.vdot(v, v).real
        floor = np.vdot(v, S.D_k @ v).real - S.C_mu * np.vdot(v, S.M @ v).real
        assert Av.real >= floor - 1e-12 * abs(floor)


def test_quadrature_order_check():
    space = build_space(build_structured_mesh(1.0, 2), 2)
    with pytest.raises(ValueError, match="order"):
        assemble_forms(space, CapCoefficients(k=1.0), order=5)


def test_non_spd_tensor_rejected():
    def bad(x, y):
        out = np.zeros(np.shape(x) + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = -1.0
        return out

    with pytest.raises(ValueError, match="positive"):
        assemble_cap(build_space(build_structured_mesh(1.0, 2), 1), CapCoefficients(k=1.0, a_scat=bad))


def test_rhs_p1_lumping():
    space = build_space(build_structured_mesh(1.0, 4), 1)
    F = assemble_rhs(space, lambda x, y: 1.0, interior=False)
    area = space.mesh.signed_areas()
    expected = np.zeros(space.n_dofs)
    np.add.at(expected, space.mesh.triangles.ravel(), np.repeat(area / 3, 3))
    assert np.allclose(F, expected)
    assert np.allclose(assemble_rhs(space, lambda x, y: 0.0), 0)


def test_rhs_integral_of_bump():
    space = build_space(build_structured_mesh(1.0, 16), 2)
    w = 0.1

    def f(x, y):
        return np.exp(-((x - 0.45) ** 2 + (y - 0.55) ** 2) / w**2)

    assert np.isclose(assemble_rhs(space, f, interior=False).sum(), np.pi * w**2, rtol=1e-8)


def test_l2_projection_properties(rng):
    space = build_space(build_structured_mesh(1.0, 5), 2)
    u = random_complex(rng, space.n_dofs)
    assert np.allclose(l2_project(space, u, include_boundary=True), u, atol=1e-12)
    assert np.allclose(l2_project(space, lambda x, y: 1.0, include_boundary=True), 1.0)
    M = assemble_forms(space, CapCoefficients(k=1.0), interior=False)["M"]
    for _ in range(20):
        c = rng.standard_normal(3)

        def g(x, y):
            return np.sin(7 * c[0] * x) * np.cos(5 * c[1] * y) + c[2] * np.exp(-30 * (x - 0.3) ** 2)

        Pg = l2_project(space, g, include_boundary=True)
        gg = load_vector(space, lambda x, y: np.abs(g(x, y)) ** 2, interior=False).sum()
        assert np.vdot(Pg, M @ Pg).real <= gg * (1 + 1e-10)
        # Galerkin orthogonality against random FE test functions
        w = random_complex(rng, space.n_dofs)
        lhs = np.vdot(w, M @ Pg)
        rhs = np.vdot(w, load_vector(space, g, interior=False))
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs)
