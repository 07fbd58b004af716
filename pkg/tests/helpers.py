"""Shared test oracles: central finite differences and error metrics."""

from __future__ import annotations

import numpy as np


def finite_difference(f, tensors, step: float = 1e-5):
    """Central-difference gradient of the scalar ``f()`` w.r.t. each tensor.

    ``f`` must recompute the forward pass from the tensors' current data on
    every call (no tape). Entries are perturbed in place and restored.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Worst-case elementwise relative error with an absolute floor.

    The floor keeps finite-difference noise (~1e-11 for step 1e-5 in double)
    from dominating comparisons of near-zero gradient entries.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
