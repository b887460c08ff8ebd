"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-3) -> np.ndarray:
    """d fn() / d param by central differences; ``fn`` must return a scalar."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    fn().backward()
    return [p.grad.astype(np.float64).copy() for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs gap scaled by the larger gradient; ``floor`` keeps exactly-zero gradients from amplifying noise."""
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> float:
    """Largest relative error between backprop and finite differences over ``params``."""
    analytic = analytic_grads(fn, params)
    numeric = [numeric_grad(fn, p, h) for p in params]
    # a parameter whose true gradient is zero is judged against the overall scale
    overall = max([1e-6] + [float(np.abs(g).max()) for g in analytic + numeric if g.size])
    worst = 0.0
    for g, n in zip(analytic, numeric):
        worst = max(worst, relative_error(g, n, floor=1e-3 * overall))
    return worst
