"""A discretized CAP problem together with its subdomain cover and coarse space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import CapCoefficients, SystemMatrices, assemble_cap, assemble_rhs, make_coefficients
from .decomposition import (
    CoarseSpace,
    LocalRestrictions,
    PartitionOfUnity,
    SubdomainCover,
    build_coarse_space,
    build_cover,
    build_pou,
    build_subdomain_restrictions,
)
from .fespace import FeSpace, build_space
from .mesh import Mesh, build_structured_mesh, refine_uniform
from .preconditioner import SchwarzPreconditioner, setup


@dataclass(eq=False)
class HelmholtzProblem:
    system: SystemMatrices
    cover: SubdomainCover | None = None
    pou: PartitionOfUnity | None = None
    local: LocalRestrictions | None = None
    coarse: CoarseSpace | None = None

    @property
    def space(self) -> FeSpace:
        return self.system.space

    @property
    def mesh(self) -> Mesh:
        return self.system.space.mesh

    @property
    def coeff(self) -> CapCoefficients:
        return self.system.coeff

    @property
    def k(self) -> float:
        return self.system.coeff.k

    @property
    def R0(self):
        return None if self.coarse is None else self.coarse.R0

    def preconditioner(self, variant: str = "hybrid_left") -> SchwarzPreconditioner:
        return setup(self.system.A, self.system.D_k, self.R0, self.local, variant, fact_Dk=self.system.factor_D())

    def rhs(self, preset: str = "gaussian_bump") -> np.ndarray:
        return assemble_rhs(self.space, rhs_field(preset, self.k, self.coeff.L, self.coeff.R1))


def rhs_field(preset: str, k: float, L: float = 1.0, R1: float | None = None):
    """Source terms supported where the absorbing potential vanishes.

    ``gaussian_bump``: ``exp(-|x - x0|^2 / w^2)`` with ``w = 2/k`` centred at
    ``x0 = (0.45 L, 0.55 L)``. ``chi_plane_wave``: ``chi(x) exp(i k x_1)``
    with ``chi`` a smooth bump vanishing outside the disc of radius ``R1/2``
    about the centre.
    """
    c = 0.5 * L
    if preset == "gaussian_bump":
        x0, y0 = 0.45 * L, 0.55 * L
        w = 2.0 / k

        def f(x, y):
            return np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / w**2) + 0j

        return f
    if preset == "chi_plane_wave":
        rad = 0.5 * (0.4 * L if R1 is None else R1)

        def f(x, y):
            s = np.clip(((x - c) ** 2 + (y - c) ** 2) / rad**2, 0.0, 1.0)
            with np.errstate(divide="ignore", over="ignore"):
                chi = np.where(s < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - s, 1e-300)), 0.0)
            return chi * np.exp(1j * k * x)

        return f
    raise ValueError(f"unknown rhs preset {preset!r}; expected gaussian_bump or chi_plane_wave")


def build_problem(
    k: float,
    n_fine: int,
    p_f: int = 1,
    p_c: int = 1,
    coarse_levels: int | None = 1,
    n_sub_per_side: int | tuple[int, int] = 2,
    overlap_layers: int = 2,
    L: float = 1.0,
    preset: str = "constant",
    V0: float = 1.0,
) -> HelmholtzProblem:
    """Fine problem on an ``n_fine x n_fine`` grid with cover and coarse space.

    The coarse mesh has ``n_fine / 2**coarse_levels`` cells per side and the
    fine mesh is its uniform refinement, so the pair is nested. Pass
    ``coarse_levels=None`` for no coarse level and ``n_sub_per_side=0`` for
    no subdomains.
    """
    levels = 0 if coarse_levels is None else int(coarse_levels)
    if n_fine % (2**levels):
        raise ValueError(f"n_fine={n_fine} is not divisible by 2**coarse_levels={2**levels}")
    coarse_mesh = build_structured_mesh(L, n_fine // 2**levels)
    fine_mesh = refine_uniform(coarse_mesh, levels)
    space = build_space(fine_mesh, p_f)
    system = assemble_cap(space, make_coefficients(k, L=L, preset=preset, V0=V0))
    coarse = None
    if coarse_levels is not None:
        cspace = space if (levels == 0 and p_c == p_f) else build_space(coarse_mesh if levels else fine_mesh, p_c)
        coarse = build_coarse_space(space, cspace)
    cover = pou = local = None
    if np.any(np.atleast_1d(n_sub_per_side)):
        cover = build_cover(fine_mesh, n_sub_per_side, overlap_layers)
        pou = build_pou(fine_mesh, cover)
        local = build_subdomain_restrictions(space, cover)
    return HelmholtzProblem(system=system, cover=cover, pou=pou, local=local, coarse=coarse)
