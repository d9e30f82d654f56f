"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

from typing import Dict, Iterator, Optional

import numpy as np

from ..diffcore import Tensor
from ..diffcore import functional as F
from ..errors import DimensionError


class Module:
    """Holds parameters (trainable Tensors) and child modules as attributes.

    Parameter names are dotted attribute paths in attribute-definition order,
    with list positions as path components (``blocks.0.attn.wq``).
    """

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            for key, p in _walk(value, prefix + name):
                out[key] = p
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, path) -> Iterator:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".").items()
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def normal_init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.standard_normal(shape) * std)


class Linear(Module):
    """``y = x W + b`` with ``W ~ N(0, gain^2 / fan_in)``."""

    def __init__(self, rng, d_in: int, d_out: int, gain: float = 1.0, bias: bool = True):
        self.weight = normal_init(rng, (d_in, d_out), gain / np.sqrt(d_in))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y if self.bias is None else F.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, out_gain: float = 1.0):
        self.fc1 = Linear(rng, dim, hidden, gain=np.sqrt(2.0))
        self.fc2 = Linear(rng, hidden, dim, gain=out_gain)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention of ``q_in`` over ``kv_in``.

    Inputs are ``(B, Nq, D)`` and ``(B, Nk, Dkv)``. The second return value is
    the head-averaged attention matrix ``(B, Nq, Nk)`` when requested.
    """

    def __init__(self, rng, dim: int, heads: int, kv_dim: Optional[int] = None,
                 out_gain: float = 1.0):
        if dim % heads:
            raise DimensionError("attention", (dim,), (heads,), detail="width not divisible by heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self._heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, kv_dim, dim)
        self.wv = Linear(rng, kv_dim, dim)
        self.wo = Linear(rng, dim, dim, gain=out_gain)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        return F.permute(F.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, need_weights: bool = False):
        b, nq, d = q_in.shape
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        scores = F.scale(F.matmul(q, F.transpose_2d(k)), 1.0 / np.sqrt(d // self._heads))
        attn = F.softmax_lastdim(scores)
        ctx = F.reshape(F.permute(F.matmul(attn, v), (0, 2, 1, 3)), (b, nq, d))
        weights = attn.data.mean(axis=1) if need_weights else None
        return self.wo(ctx), weights
