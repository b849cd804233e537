"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def numerical_grad(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``array`` (mutated and restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error with a floor so exact zeros don't blow up."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5
) -> list[float]:
    """Compare autodiff gradients of ``loss_fn()`` against central differences.

    ``tensors`` must be float64 leaves with ``requires_grad``. Returns one
    relative error per tensor.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float(loss_fn().data)

    return [relative_error(a, numerical_grad(value, t.data, step)) for a, t in zip(analytic, tensors)]
