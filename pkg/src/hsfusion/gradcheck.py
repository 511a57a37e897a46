"""Central finite-difference gradients for verifying backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(f: Callable[[], Tensor], wrt: Tensor, step: float = 1e-6) -> np.ndarray:
    """Estimate d f() / d wrt by perturbing each entry of ``wrt.data`` in place."""
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    backward(f())
    out = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm error scaled by the larger of the two max-norms."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6) -> float:
    """Worst relative error between backward() and finite differences over ``params``."""
    analytic = analytic_grads(f, params)
    return max(relative_error(a, numerical_grad(f, p, step)) for a, p in zip(analytic, params))
