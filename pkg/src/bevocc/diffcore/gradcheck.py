"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference normalized by the larger of the two gradients' max magnitudes."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                   indices=None) -> np.ndarray:
    """d fn / d x by central differences, perturbing ``x`` in place.

    ``indices`` restricts the probe to a subset of flat positions; other
    entries of the result stay zero.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_op(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             h: float = 1e-5, grad_mask: Sequence[bool] | None = None) -> float:
    """Worst relative error of ``op``'s gradients over all differentiable inputs.

    The op output is contracted with a fixed random cotangent so every
    output element contributes.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    mask = list(grad_mask) if grad_mask is not None else [True] * len(arrays)
    tensors = [Tensor(a, requires_grad=m) for a, m in zip(arrays, mask)]
    out = op(*tensors)
    cot = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float((op(*[Tensor(a) for a in arrays]).data * cot).sum())

    loss = (out * Tensor(cot)).sum()
    backward(loss)
    worst = 0.0
    for t, a, m in zip(tensors, arrays, mask):
        if not m:
            continue
        num = numerical_grad(scalar, a, h)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(ana, num))
    return worst
