"""Shared test oracles: central finite differences and brute-force assignment."""
from __future__ import annotations

import itertools

import numpy as np

H = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum over all injective row->column maps (rows <= cols)."""
    n, m = cost.shape
    best = np.inf
    for cols in itertools.permutations(range(m), n):
        best = min(best, sum(cost[i, c] for i, c in enumerate(cols)))
    return float(best)


def random_boxes(rng, n, lo=0.05, hi=0.5):
    """Valid center-format boxes inside the unit square."""
    wh = rng.uniform(lo, hi, size=(n, 2))
    c = rng.uniform(wh / 2, 1 - wh / 2)
    return np.concatenate([c, wh], axis=1)
