"""Shared numeric oracles for the test suite."""

import numpy as np


def fd_gradients(fn, arrays, step=1e-5):
    """Central finite differences of a scalar function of several arrays.

    ``fn`` takes the arrays (read-only) and returns a float. Returns one
    gradient array per input, computed coordinate by coordinate.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = fn(*arrays)
            flat[i] = saved - step
            lo = fn(*arrays)
            flat[i] = saved
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst-coordinate relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
