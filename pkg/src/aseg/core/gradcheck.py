"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base, dtype=np.float64)).item()
            flat[i] = orig - h
            fm = f(Tensor(base, dtype=np.float64)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, dtype=np.float64)
    f(xt).backward()
    if xt.grad is None:
        return np.zeros_like(xt.data)
    return xt.grad


def check_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Max over components of |analytic - numeric| / (|analytic| + 1e-8)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    a = analytic_gradient(f, arr)
    n = numerical_gradient(f, arr, h)
    return float(np.max(np.abs(a - n) / (np.abs(a) + 1e-8)))
