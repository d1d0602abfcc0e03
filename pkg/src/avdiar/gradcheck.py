"""Central finite-difference gradient verification.

The oracle only ever calls the forward path, so it stays independent of the
backward implementation it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward


def finite_difference_grads(
    f: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Numeric d f / d t for each input tensor, by central differences."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(*tensors).item()
            flat[i] = orig - h
            lo = f(*tensors).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(
    f: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Worst-case relative disagreement between backward() and the oracle.

    Relative to max(|analytic|, |numeric|, 1) per element, so near-zero
    gradients are compared absolutely.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    loss = f(*tensors)
    backward(loss)
    numeric = finite_difference_grads(f, tensors, h=h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
