"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from recnet.engine.tensor import Tensor


def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences ``(f(x + h) - f(x - h)) / 2h`` for every coordinate."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.sum(f(*inputs).data))
            flat[i] = orig - h
            fm = float(np.sum(f(*inputs).data))
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(f: Callable[..., Tensor], point, h: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``point`` is a tensor or a sequence of tensors passed positionally to
    ``f``, which must return a scalar. The relative error of a coordinate is
    ``|a - b| / max(|a|, |b|, 1e-8)``. Run it in float64: float32 rounding
    alone exceeds typical tolerances.
    """
    inputs = [point] if isinstance(point, Tensor) else list(point)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    if out.requires_grad:
        out.backward()
    analytic = [np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    for t, (rg, g) in zip(inputs, saved):
        t.requires_grad, t.grad = rg, g
    numeric = numerical_gradient(f, inputs, h)
    worst = 0.0
    for a, b in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst
