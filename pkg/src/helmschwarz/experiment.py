"""Config-driven experiments: build, precondition, solve, analyse and report."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis
from .fespace import build_space
from .gmres import GmresConfig, elman_iteration_predictor, weighted_gmres, write_residual_csv
from .mesh import refine_uniform
from .preconditioner import VARIANTS
from .problem import build_problem

ANALYSES = ("fov", "repq", "splitting", "eta", "qo", "decay")
MAX_DOFS = 1_000_000
DEFAULT_PPW = 10.0
DEFAULT_CELLS_PER_SUBDOMAIN = 4
SWEEP_COLUMNS = ("k", "N", "Lambda", "dofs", "iters", "fov_min", "norm_est", "wallclock", "status")


class ExperimentError(RuntimeError):
    """A module error annotated with the configuration that triggered it."""


def _require(name, value, types, optional=False):
    if value is None and optional:
        return
    if isinstance(value, bool) or not isinstance(value, types):
        raise ValueError(f"config field {name!r} has invalid value {value!r}")


@dataclass
class ExperimentConfig:
    """Parameters of one run.

    Mesh resolution is given either directly (``n_fine_per_side``) or as
    points per wavelength (``ppw_fine``, counting ``p_f`` nodes per cell,
    default 10); the cell count is rounded up to a multiple of
    ``2**coarse_levels``. The cover is either ``n_sub_per_side`` boxes or
    boxes of ``cells_per_subdomain`` fine cells (default 4; fixed dofs per
    subdomain under a k-sweep). ``coarse_levels=None`` removes the coarse level.
    """

    k: float
    L: float = 1.0
    p_f: int = 1
    p_c: int = 1
    n_fine_per_side: int | None = None
    ppw_fine: float | None = None
    coarse_levels: int | None = 1
    n_sub_per_side: int | None = None
    cells_per_subdomain: int | None = None
    overlap_layers: int = 2
    variant: str = "hybrid_left"
    tol: float = 1e-6
    max_iter: int = 400
    preset: str = "constant"
    V0: float = 1.0
    rhs: str = "gaussian_bump"
    seed: int = 0
    analyses: list[str] = field(default_factory=list)
    fov_random: int = 100
    fov_refine: int = 40
    c_width: float = 4.0

    def __post_init__(self):
        for name in ("k", "L", "tol", "V0", "c_width"):
            _require(name, getattr(self, name), (int, float))
        for name in ("p_f", "p_c", "overlap_layers", "max_iter", "seed", "fov_random", "fov_refine"):
            _require(name, getattr(self, name), int)
        for name in ("ppw_fine",):
            _require(name, getattr(self, name), (int, float), optional=True)
        for name in ("n_fine_per_side", "coarse_levels", "n_sub_per_side", "cells_per_subdomain"):
            _require(name, getattr(self, name), int, optional=True)
        if self.k <= 0 or self.L <= 0:
            raise ValueError("k and L must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_fine_per_side is not None and self.ppw_fine is not None:
            raise ValueError("give at most one of n_fine_per_side and ppw_fine")
        if self.n_sub_per_side is not None and self.cells_per_subdomain is not None:
            raise ValueError("give at most one of n_sub_per_side and cells_per_subdomain")
        if self.rhs not in ("gaussian_bump", "chi_plane_wave"):
            raise ValueError(f"unknown rhs preset {self.rhs!r}; expected gaussian_bump or chi_plane_wave")
        if self.preset not in ("constant", "lens"):
            raise ValueError(f"unknown coefficient preset {self.preset!r}; expected constant or lens")
        self.analyses = list(self.analyses)
        bad = sorted(set(self.analyses) - set(ANALYSES))
        if bad:
            raise ValueError(f"unknown analyses {bad}; expected a subset of {ANALYSES}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    # derived sizes -------------------------------------------------------
    @property
    def n_fine(self) -> int:
        step = 2 ** (self.coarse_levels or 0)
        if self.n_fine_per_side is not None:
            n = int(self.n_fine_per_side)
        else:
            ppw = DEFAULT_PPW if self.ppw_fine is None else self.ppw_fine
            n = math.ceil(ppw * self.k * self.L / (2 * math.pi * self.p_f) - 1e-9)
        return max(step, step * math.ceil(n / step))

    @property
    def n_sub(self) -> int:
        if self.n_sub_per_side is not None:
            return int(self.n_sub_per_side)
        cells = DEFAULT_CELLS_PER_SUBDOMAIN if self.cells_per_subdomain is None else self.cells_per_subdomain
        return max(1, self.n_fine // cells)

    @property
    def predicted_dofs(self) -> int:
        return (self.p_f * self.n_fine + 1) ** 2


def preset_config(name: str, k: float, **overrides) -> ExperimentConfig:
    """Parameter couplings of the four scenario families.

    ``case_a``: ``p_c = p_f`` fixed, ``H_coa = 2h``. ``case_b``: ``p_c > p_f``
    fixed, interpolated coarse space on a mesh ``2h``. ``case_c``:
    ``p_c = p_f = 1 + log(kL)/2`` (rounded), ``H_coa = 2h``. ``case_d``:
    coarse mesh equal to the fine mesh with ``p_f = 1 + log(kL)/2`` and
    ``p_c = p_f - 1``. The logarithms are evaluated at the given ``k``.
    """
    L = overrides.get("L", 1.0)
    logk = math.log(max(k * L, math.e))
    p_log = max(2, int(round(1 + 0.5 * logk)))
    base = {
        "case_a": dict(p_f=1, p_c=1, coarse_levels=1, ppw_fine=10.0),
        "case_b": dict(p_f=1, p_c=2, coarse_levels=1, ppw_fine=10.0),
        "case_c": dict(p_f=p_log, p_c=p_log, coarse_levels=1, ppw_fine=10.0),
        "case_d": dict(p_f=p_log, p_c=p_log - 1, coarse_levels=0, ppw_fine=6.0),
    }
    if name not in base:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(base)}")
    params = dict(k=k, **base[name])
    params.update(overrides)
    return ExperimentConfig.from_dict(params)


@dataclass
class ExperimentReport:
    config: dict
    summary: dict
    gmres: dict | None
    analyses: dict
    timings: dict
    residual_history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return analysis._jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _annotate(exc: Exception, config: ExperimentConfig) -> ExperimentError:
    return ExperimentError(f"{type(exc).__name__}: {exc} [config: {json.dumps(config.to_dict(), sort_keys=True)}]")


def _summary(problem, config: ExperimentConfig) -> dict:
    space = problem.space
    mesh = problem.mesh
    out = {
        "n_fine_per_side": mesh.n_per_side,
        "h": mesh.cell_size,
        "kh": config.k * mesh.cell_size,
        "kh_over_p": config.k * mesh.cell_size / config.p_f,
        "dofs": space.n_interior,
        "coarse_dofs": None if problem.R0 is None else problem.R0.shape[0],
        "coarse_mode": None if problem.coarse is None else problem.coarse.mode,
        "H_coa": None if problem.coarse is None else problem.coarse.coarse.mesh.h_max,
        "C_mu": problem.system.C_mu,
    }
    cover = problem.cover
    if cover is not None:
        sizes = [len(i) for i in problem.local.indices]
        width_layers = config.c_width * math.log(max(config.k * config.L, 1.0)) / 2
        out.update(
            N=cover.n_sub,
            Lambda=cover.Lambda,
            H_sub=cover.H_sub,
            delta=cover.delta,
            dofs_per_subdomain_max=max(sizes),
            dofs_per_subdomain_mean=float(np.mean(sizes)),
            C_PoU=problem.pou.C_PoU,
            overlap_width_condition=bool(config.overlap_layers - config.overlap_layers // 2 >= width_layers),
        )
    else:
        out.update(N=0, Lambda=0)
    return out


def _random_vector(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def _run_analyses(problem, precond, config: ExperimentConfig, names) -> tuple[dict, dict]:
    results, timings = {}, {}
    rng = np.random.default_rng(config.seed)
    for name in names:
        t0 = time.perf_counter()
        try:
            if name == "fov":
                op = precond.operator()
                rep = analysis.sample_field_of_values(
                    op, op.weight, n_random=config.fov_random, n_refine=config.fov_refine, seed=config.seed
                )
                d = rep.to_dict()
                d["side"] = op.side
                if rep.fov_min_abs > 0:
                    d["elman_predictor"] = elman_iteration_predictor(rep.norm_estimate, rep.fov_min_abs, config.tol)
                results[name] = d
            elif name == "repq":
                results[name] = {"max_mismatch": analysis.verify_repq_identity(problem, precond, 20, config.seed)}
            elif name == "splitting":
                v = _random_vector(rng, problem.space.n_interior)
                levels = ["one"] + (["two"] if problem.coarse is not None else [])
                results[name] = {
                    f"{lev}_{mode}": analysis.verify_stable_splitting(problem, v, lev, mode).to_dict()
                    for lev in levels
                    for mode in ("defect", "exact")
                }
            elif name == "eta":
                results[name] = analysis.estimate_eta_coarse(problem, problem.R0, seed=config.seed).to_dict()
            elif name == "qo":
                ref = build_space(refine_uniform(problem.mesh, 2), config.p_f)
                if ref.n_interior > MAX_DOFS:
                    raise ValueError(f"reference space has {ref.n_interior} dofs (> {MAX_DOFS})")
                results[name] = analysis.check_quasi_optimality(problem, ref).to_dict()
            elif name == "decay":
                mesh = problem.mesh
                patch = np.flatnonzero(mesh.centroids()[:, 0] < mesh.cell_size)
                results[name] = analysis.measure_l2_projection_decay(problem.space, patch).to_dict()
        except Exception as exc:  # recorded, other analyses continue
            results[name] = {"error": f"{type(exc).__name__}: {exc}"}
        timings[name] = time.perf_counter() - t0
    return results, timings


def run_experiment(config: ExperimentConfig, solve: bool = True, out_dir: str | Path | None = None,
                   run_name: str = "run") -> ExperimentReport:
    """Build the problem, solve with preconditioned weighted GMRES and run the requested analyses.

    The GMRES run is deterministic; ``seed`` only drives the random probes of
    the analyses. With ``out_dir`` the residual history is written to
    ``residuals_<run_name>.csv``.
    """
    if config.predicted_dofs > MAX_DOFS:
        raise ExperimentError(
            f"predicted {config.predicted_dofs} fine dofs exceeds the budget of {MAX_DOFS}; "
            "lower k, ppw_fine or p_f, or set n_fine_per_side explicitly"
        )
    timings = {}
    try:
        t0 = time.perf_counter()
        problem = build_problem(
            config.k,
            config.n_fine,
            p_f=config.p_f,
            p_c=config.p_c,
            coarse_levels=config.coarse_levels,
            n_sub_per_side=config.n_sub,
            overlap_layers=config.overlap_layers,
            L=config.L,
            preset=config.preset,
            V0=config.V0,
        )
        timings["build"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        precond = problem.preconditioner(config.variant)
        timings["setup"] = time.perf_counter() - t0
        gm = None
        history = []
        if solve:
            t0 = time.perf_counter()
            op = precond.operator()
            F = problem.rhs(config.rhs)
            b = precond.apply(F) if op.side == "left" else F
            result = weighted_gmres(op, b, GmresConfig(config.tol, config.max_iter, op.weight))
            if op.side == "right":
                result.solution = precond.apply(result.solution)
            timings["gmres"] = time.perf_counter() - t0
            rel = np.linalg.norm(problem.system.A @ result.solution - F) / np.linalg.norm(F)
            history = result.residual_history
            gm = {
                "iterations": result.iterations,
                "converged": result.converged,
                "final_residual": history[-1],
                "true_residual": result.true_residual,
                "euclidean_residual_original": float(rel),
                "orthogonality_drift": result.orthogonality_drift,
                "reorthogonalized": result.reorthogonalized,
                "side": op.side,
            }
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_residual_csv(result, Path(out_dir) / f"residuals_{run_name}.csv")
        results, atimes = _run_analyses(problem, precond, config, config.analyses)
        timings.update(atimes)
        summary = _summary(problem, config)
    except ExperimentError:
        raise
    except Exception as exc:
        raise _annotate(exc, config) from exc
    timings["total"] = sum(timings.values())
    return ExperimentReport(
        config=config.to_dict(),
        summary=summary,
        gmres=gm,
        analyses=results,
        timings=timings,
        residual_history=history,
    )


def _coerce(config: ExperimentConfig, param: str, value):
    names = {f.name for f in fields(ExperimentConfig)}
    if param not in names:
        raise ValueError(f"unknown sweep parameter {param!r}")
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    return value


def run_sweep(base: ExperimentConfig, param: str, values, out_dir: str | Path | None = None):
    """One run per value of ``param``; failures are recorded in their row.

    Returns ``(reports, csv_text)``; ``reports`` holds ``None`` for failed rows.
    """
    reports, rows = [], []
    for i, raw in enumerate(values):
        value = _coerce(base, param, raw)
        t0 = time.perf_counter()
        row = dict.fromkeys(SWEEP_COLUMNS, "")
        try:
            cfg = base.replace(**{param: value})
            row["k"] = cfg.k
            rep = run_experiment(cfg, out_dir=out_dir, run_name=f"{param}_{i}")
            s, fov = rep.summary, rep.analyses.get("fov", {})
            row.update(
                N=s["N"],
                Lambda=s["Lambda"],
                dofs=s["dofs"],
                iters=rep.gmres["iterations"] if rep.gmres else "",
                fov_min=fov.get("fov_min_abs", ""),
                norm_est=fov.get("norm_estimate", ""),
                status="ok" if rep.gmres is None or rep.gmres["converged"] else "not converged",
            )
            reports.append(rep)
        except Exception as exc:
            row["status"] = f"error: {exc}".replace("\n", " ")
            reports.append(None)
        row["wallclock"] = f"{time.perf_counter() - t0:.3f}"
        rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(text)
    return reports, text
