"""Central finite differences, used as the reference for gradient tests."""

from __future__ import annotations

import numpy as np


def finite_difference(f, arrays: list[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Numerically differentiate a scalar function of several arrays.

    ``f`` must accept float64 copies of ``arrays`` and return a python float.
    Returns one float64 gradient array per input, computed with central
    differences, perturbing one element at a time.
    """
    base = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    grads = []
    for k, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(base)
            flat[i] = orig - h
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a: np.ndarray, b: np.ndarray, abs_floor: float = 1e-6) -> float:
    """Max elementwise relative error, with an absolute floor near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), abs_floor)
    return float(np.max(np.abs(a - b) / denom))
