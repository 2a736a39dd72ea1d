"""Central finite differences, the independent oracle for every backward rule."""

from __future__ import annotations

import numpy as np


def finite_difference_grad(f, params, eps=1e-4):
    """Estimate d f / d p for each array (or Tensor) in ``params``.

    ``f`` takes no arguments and reads the current parameter values; each
    coordinate is perturbed in place by +/- eps and restored afterwards.
    """
    grads = []
    for p in params:
        arr = p.data if hasattr(p, "data") and isinstance(p.data, np.ndarray) else p
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), with 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
