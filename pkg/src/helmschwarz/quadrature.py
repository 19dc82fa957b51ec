"""Quadrature on the reference triangle {x, y >= 0, x + y <= 1}."""
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@lru_cache(maxsize=None)
def triangle_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed (conical product) Gauss rule exact for polynomials of total degree ``order``.

    Returns ``(points, weights)`` with ``points`` of shape ``(nq, 2)``; the
    weights sum to the reference area 1/2.
    """
    if order < 0:
        raise ValueError("order must be non-negative")
    n = order // 2 + 1
    xj, wj = roots_jacobi(n, 1.0, 0.0)  # weight (1 - x) on [-1, 1]
    xl, wl = roots_legendre(n)
    s = 0.5 * (1.0 + xj)
    ws = 0.25 * wj
    t = 0.5 * (1.0 + xl)
    wt = 0.5 * wl
    S, T = np.meshgrid(s, t, indexing="ij")
    points = np.column_stack([S.ravel(), (T * (1.0 - S)).ravel()])
    weights = np.outer(ws, wt).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return points, weights
