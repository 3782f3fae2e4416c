"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all elements."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(loss_fn, tensors: list[Tensor], step: float = 1e-4) -> float:
    """Compare backprop gradients of the scalar ``loss_fn()`` against central differences.

    Every element of every tensor in ``tensors`` is perturbed in place by
    ``+-step``.  Returns the worst relative error.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        num = np.zeros_like(t.data)
        flat, out = t.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
        worst = max(worst, max_relative_error(a, num))
    return worst
