"""Unrestarted GMRES in an arbitrary Hermitian positive-definite inner product."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .linalg import Weight


@dataclass
class GmresConfig:
    tol: float = 1e-6
    max_iter: int = 400
    weight: Weight | None = None

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class GmresResult:
    solution: np.ndarray
    iterations: int
    residual_history: list[float]
    converged: bool
    true_residual: float = float("nan")
    orthogonality_drift: float = 0.0
    reorthogonalized: int = 0
    basis: np.ndarray | None = field(default=None, repr=False)


def as_matvec(operator):
    """Turn a matrix, ``LinearOperator``-like object or callable into ``v -> M v``."""
    if callable(operator) and not hasattr(operator, "shape"):
        return operator
    if hasattr(operator, "matvec"):
        return operator.matvec
    if sp.issparse(operator) or isinstance(operator, np.ndarray):
        return lambda v: operator @ v
    if callable(operator):
        return operator
    raise TypeError(f"cannot apply operator of type {type(operator).__name__}")


def weighted_gmres(operator, rhs: np.ndarray, config: GmresConfig | None = None,
                   keep_basis: bool = False) -> GmresResult:
    """Solve ``M x = rhs`` minimizing the ``W``-norm of the residual over Krylov spaces.

    Arnoldi uses modified Gram-Schmidt in the weighted inner product; a second
    classical pass is made whenever the new vector keeps a component above
    ``1e-10`` (relative) along the current basis. The initial guess is zero
    and ``residual_history[0] = 1``.
    """
    config = config or GmresConfig()
    W = config.weight or Weight()
    apply = as_matvec(operator)
    b = np.asarray(rhs, dtype=complex)
    n = b.shape[0]
    beta = W.norm(b)
    if beta == 0:
        raise ValueError("right-hand side must be nonzero")
    m = min(config.max_iter, n)
    Q = np.zeros((n, m + 1), dtype=complex)
    WQ = np.zeros((n, m + 1), dtype=complex)
    H = np.zeros((m + 1, m), dtype=complex)
    cs = np.zeros(m)
    sn = np.zeros(m, dtype=complex)
    g = np.zeros(m + 1, dtype=complex)
    g[0] = beta
    Q[:, 0] = b / beta
    WQ[:, 0] = W.apply(b) / beta
    history = [1.0]
    reorth = 0
    j = -1
    breakdown = False
    for j in range(m):
        w = np.asarray(apply(Q[:, j]), dtype=complex)
        for i in range(j + 1):
            H[i, j] = np.vdot(WQ[:, i], w)
            w = w - H[i, j] * Q[:, i]
        Ww = W.apply(w)
        nrm = np.sqrt(max(np.vdot(w, Ww).real, 0.0))
        c = WQ[:, : j + 1].conj().T @ w
        if nrm > 0 and np.abs(c).max() > 1e-10 * nrm:
            w = w - Q[:, : j + 1] @ c
            H[: j + 1, j] += c
            Ww = W.apply(w)
            nrm = np.sqrt(max(np.vdot(w, Ww).real, 0.0))
            reorth += 1
        H[j + 1, j] = nrm
        # |M q_j|_W by Pythagoras
        breakdown = nrm <= 1e-14 * np.linalg.norm(H[: j + 2, j])
        if not breakdown:
            Q[:, j + 1] = w / nrm
            WQ[:, j + 1] = Ww / nrm
        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -np.conj(sn[i]) * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = t
        cs[j], sn[j] = _givens(H[j, j], H[j + 1, j])
        H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
        H[j + 1, j] = 0.0
        g[j + 1] = -np.conj(sn[j]) * g[j]
        g[j] = cs[j] * g[j]
        res = abs(g[j + 1]) / beta
        history.append(float(res))
        if res <= config.tol or breakdown:
            break
    k = j + 1
    y = _back_substitute(H[:k, :k], g[:k])
    x = Q[:, :k] @ y
    r = b - np.asarray(apply(x))
    true_res = W.norm(r) / beta
    G = Q[:, :k].conj().T @ WQ[:, :k]
    drift = float(np.abs(G - np.eye(k)).max()) if k else 0.0
    return GmresResult(
        solution=x,
        iterations=k,
        residual_history=history,
        converged=bool(history[-1] <= config.tol),
        true_residual=float(true_res),
        orthogonality_drift=drift,
        reorthogonalized=reorth,
        basis=Q[:, :k].copy() if keep_basis else None,
    )


def _givens(a: complex, b: complex) -> tuple[float, complex]:
    """Rotation with real cosine mapping ``(a, b)`` to ``(r, 0)``."""
    rho = np.hypot(abs(a), abs(b))
    if rho == 0:
        return 1.0, 0.0
    if a == 0:
        return 0.0, 1.0
    return abs(a) / rho, (a / abs(a)) * np.conj(b) / rho


def _back_substitute(R: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    y = np.zeros(k, dtype=complex)
    for i in range(k - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


def write_residual_csv(result: GmresResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "relres"])
        for i, r in enumerate(result.residual_history):
            writer.writerow([i, f"{r:.16e}"])


def elman_iteration_predictor(norm_bound: float, fov_bound: float, eps: float) -> float:
    """``(norm_bound / fov_bound) log(12 / eps)``: a growth-shape predictor, not a guarantee."""
    if fov_bound <= 0:
        raise ValueError("field of values touches origin")
    if norm_bound <= 0 or eps <= 0:
        raise ValueError("norm_bound and eps must be positive")
    if fov_bound > norm_bound * (1 + 1e-12):
        raise ValueError("fov_bound cannot exceed norm_bound")
    return float(norm_bound / fov_bound * np.log(12.0 / eps))
