"""Central finite-difference gradient checking.

The numeric side never touches the reverse-mode machinery: it re-evaluates
the forward function at perturbed inputs, element by element.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], Tensor], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing arr in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data.reshape(()))
        flat[i] = orig - eps
        lo = float(f().data.reshape(()))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|), elementwise."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of scalar f() against finite differences.

    Returns the worst relative error over all checked tensors. f is called
    fresh for the analytic pass and twice per element for the numeric one.
    """
    for t in wrt:
        t.grad = None
    out = f()
    out.backward()
    analytic = []
    for t in wrt:
        if t.grad is None:
            raise AssertionError("gradient did not reach a checked tensor")
        analytic.append(t.grad.copy())
        t.grad = None

    worst = 0.0
    for t, a in zip(wrt, analytic):
        n = numerical_gradient(f, t.data, eps=eps)
        worst = max(worst, max_relative_error(a, n))
    return worst
