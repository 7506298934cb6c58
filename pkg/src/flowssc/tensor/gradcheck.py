"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad, reset_graph


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences, perturbing ``target.data`` in place."""
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data.sum())
            flat[i] = orig - step
            down = float(fn().data.sum())
            flat[i] = orig
            out[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between backprop and finite differences over ``inputs``.

    ``fn`` must build a scalar from the inputs.  Inputs need ``requires_grad``.
    """
    reset_graph()
    for x in inputs:
        x.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numerical_grad(fn, x, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
