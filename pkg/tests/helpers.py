"""Shared numeric oracles for the test suite.

These stay deliberately independent of the implementation paths they
check: finite differences for gradients, linear scans for nearest
neighbors, per-point analytic tests for collisions.
"""

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat
    or shaped float array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_force_nearest(points: np.ndarray, q: np.ndarray) -> tuple[float, int]:
    """Exhaustive nearest neighbor; first argmin breaks ties to the
    lowest index."""
    d = np.linalg.norm(points - q, axis=1)
    i = int(np.argmin(d))
    return float(d[i]), i
