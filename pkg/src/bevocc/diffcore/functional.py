"""Differentiable operations over :class:`Tensor`.

Every op validates shapes up front and raises :class:`DimensionError` naming
itself and the offending shapes. Backward closures capture only what they need.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError, OutOfRangeError
from .tensor import Tensor, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                       "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with leading-dim broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, m = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), vjp, "matmul")


def transpose_2d(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose_2d", a.shape, detail="needs rank >= 2")
    return make_result(np.swapaxes(a.data, -1, -2), (a,),
                       lambda g: (np.swapaxes(g, -1, -2),), "transpose_2d")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("permute", a.shape, detail=f"axes {axes}")
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", src, tuple(shape)) from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def take(a, index: int) -> Tensor:
    """Select element ``index`` along the leading axis."""
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), vjp, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError("concat", *(t.shape for t in ts))
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts, vjp, "concat")


def concat_lastdim(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-1)


# -- reductions ------------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        return make_result(np.asarray(a.data.sum()), (a,),
                           lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    out = a.data.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return make_result(out, (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DimensionError("mean", a.shape, detail="empty tensor")
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / n)


# -- nonlinearities ----------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make_result(out, (a,), vjp, "gelu")


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] == 0:
        raise DimensionError("softmax_lastdim", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (a,), vjp, "softmax_lastdim")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine gamma/beta."""
    a = as_tensor(a)
    c = a.shape[-1]
    parents = [a]
    gd = bd = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (c,):
            raise DimensionError("layer_norm", a.shape, gamma.shape)
        parents.append(gamma)
        gd = gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (c,):
            raise DimensionError("layer_norm", a.shape, beta.shape)
        parents.append(beta)
        bd = beta.data
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat if gd is None else xhat * gd
    if bd is not None:
        out = out + bd

    def vjp(g):
        gx = g if gd is None else g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gd is not None:
            grads.append((g * xhat).reshape(-1, c).sum(axis=0))
        if bd is not None:
            grads.append(g.reshape(-1, c).sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, vjp, "layer_norm")


# -- spatial ops -------------------------------------------------------------

def bilinear_sample_2d(grid, coords) -> Tensor:
    """Sample a ``C x H x W`` grid at normalized ``N x 2`` (x, y) coordinates.

    Align-corners convention: x = -1 maps to column 0 and x = +1 to column
    W - 1; y likewise indexes rows. Returns ``N x C``.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError("bilinear_sample_2d", grid.shape, coords.shape)
    cd = coords.data
    if not np.all(np.isfinite(cd)) or np.any(np.abs(cd) > 1.0):
        bad = np.flatnonzero(~(np.abs(cd) <= 1.0).all(axis=1))
        raise OutOfRangeError(
            f"bilinear_sample_2d: coordinates outside [-1, 1] at rows {bad[:10].tolist()}")
    C, H, W = grid.shape
    fx = (cd[:, 0] + 1.0) * 0.5 * (W - 1)
    fy = (cd[:, 1] + 1.0) * 0.5 * (H - 1)
    x0 = np.clip(np.floor(fx).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(fy).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = fx - x0
    wy = fy - y0
    flat = np.ascontiguousarray(grid.data.reshape(C, H * W).T)  # (HW, C)
    i00, i01, i10, i11 = y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = (v00 * w00[:, None] + v01 * w01[:, None]
           + v10 * w10[:, None] + v11 * w11[:, None])

    def vjp(g):
        gg = gc = None
        if grid.requires_grad:
            acc = np.zeros((H * W, C))
            idx = np.concatenate([i00, i01, i10, i11])
            contrib = np.concatenate([g * w00[:, None], g * w01[:, None],
                                      g * w10[:, None], g * w11[:, None]])
            np.add.at(acc, idx, contrib)
            gg = acc.T.reshape(C, H, W)
        if coords.requires_grad:
            dx = ((v01 - v00) * (1 - wy)[:, None] + (v11 - v10) * wy[:, None])
            dy = ((v10 - v00) * (1 - wx)[:, None] + (v11 - v01) * wx[:, None])
            gc = np.stack([(g * dx).sum(axis=1) * 0.5 * (W - 1),
                           (g * dy).sum(axis=1) * 0.5 * (H - 1)], axis=1)
        return gg, gc

    return make_result(out, (grid, coords), vjp, "bilinear_sample_2d")


def conv2d(x, weight, bias=None) -> Tensor:
    """Same-padded stride-1 convolution on channels-last ``B x H x W x Cin``.

    ``weight`` is ``k x k x Cin x Cout`` with odd ``k``; zero padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d", x.shape, weight.shape)
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0 or cin != x.shape[3]:
        raise DimensionError("conv2d", x.shape, weight.shape)
    B, H, W, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols = np.empty((B, H, W, k, k, cin))
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + H, dx:dx + W, :]
    cols2 = cols.reshape(B * H * W, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols2 @ wmat).reshape(B, H, W, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError("conv2d", x.shape, weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        g2 = g.reshape(B * H * W, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, H, W, k, k, cin)
            gxp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    gxp[:, dy:dy + H, dx:dx + W, :] += gcols[:, :, :, dy, dx, :]
            gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
        if weight.requires_grad:
            gw = (cols2.T @ g2).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, vjp, "conv2d")


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of channels-last ``B x H x W x C``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("upsample_nearest2x", x.shape)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return make_result(out, (x,),
                       lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),),
                       "upsample_nearest2x")


# -- loss --------------------------------------------------------------------

def bce(logits, labels) -> Tensor:
    """Mean binary cross-entropy computed from logits (log-sum-exp stable)."""
    logits = as_tensor(logits)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError("bce", logits.shape, y.shape)
    if logits.size == 0:
        raise ContractError("bce: empty batch")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return make_result(np.asarray(per.mean()), (logits,),
                       lambda g: (g * (_sigmoid(z) - y) / n,), "bce")


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "sigmoid": sigmoid,
    "concat_lastdim": lambda *ts: concat(ts, axis=-1),
    "bilinear_sample_2d": bilinear_sample_2d,
    "transpose_2d": transpose_2d,
    "mean": mean,
    "sum": sum,
    "bce": bce,
    "reshape": reshape,
    "take": take,
    "permute": permute,
    "conv2d": conv2d,
    "upsample_nearest2x": upsample_nearest2x,
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("gelu", x)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    return fn(*inputs, **params)
