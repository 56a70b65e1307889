"""Central finite-difference oracle, independent of the tape."""

import numpy as np


def numeric_grad(f, arr: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """d f() / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    idxs = range(flat.size) if indices is None else indices
    for i in idxs:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, indices=None, abs_floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if indices is not None:
        a, n = a[list(indices)], n[list(indices)]
    denom = np.abs(a) + np.abs(n)
    tiny = denom < abs_floor
    err = np.zeros_like(a)
    err[~tiny] = np.abs(a - n)[~tiny] / denom[~tiny]
    # tiny pairs are compared absolutely
    if np.any(tiny) and np.max(np.abs(a - n)[tiny]) > abs_floor:
        return np.inf
    return float(err.max()) if err.size else 0.0
