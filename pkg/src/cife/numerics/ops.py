"""Differentiable ops over :class:`Tensor`.

Broadcasting is limited to scalars and bias-style operands: the second
operand of ``add``/``mul`` may broadcast against the first, never the other
way around, so the output shape is always the shape of the first operand.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_bias_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out != a.shape:
        raise ShapeError(f"{opname}: second operand {b.shape} may not enlarge first operand {a.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_bias_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return (g if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_bias_shape(a, b, "sub")
    sb = b.shape

    def backward(g):
        return (g if a.requires_grad else None,
                -_unbroadcast(g, sb) if b.requires_grad else None)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)

        def backward_scalar(g):
            return (g * np.asarray(s, dtype=g.dtype),)

        return make_result(a.data * np.asarray(s, dtype=a.dtype), (a,), backward_scalar)
    _check_bias_shape(a, b, "mul")
    sb = b.shape

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                _unbroadcast(g * a.data, sb) if b.requires_grad else None)

    return make_result(a.data * b.data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * a.data,)

    return make_result(a.data * a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return make_result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return make_result(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return make_result(out, (a,), backward)


# -- shape ---------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(tuple(shape))

    def backward(g):
        return (g.reshape(src),)

    return make_result(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            grads.append(g[tuple(index)])
        return tuple(grads)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- reductions ----------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` may be a constant array."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with identical leading dims (no batch broadcasting)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out.reshape(lead + (weight.shape[0],)), inputs, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(D)) v over the last two axes.

    ``mask`` is an additive constant broadcast onto the (Lq, Lk) score
    matrix, e.g. ``-inf`` above the diagonal for causal attention.
    """
    if q.ndim < 3 or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(f"attention: expected rank>=3 tensors, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: query {q.shape} and key {k.shape} disagree")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: key {k.shape} and value {v.shape} lengths disagree")
    if k.shape[-2] < 1:
        raise ShapeError("attention: key sequence is empty")
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = np.swapaxes(k.data, -1, -2)
    scores = (q.data @ kt) * np.asarray(scale, dtype=q.dtype)
    if mask is not None:
        scores = scores + mask.astype(q.dtype)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ v.data

    def backward(g):
        gv = np.swapaxes(w, -1, -2) @ g if v.requires_grad else None
        if not (q.requires_grad or k.requires_grad):
            return None, None, gv
        gw = g @ np.swapaxes(v.data, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * np.asarray(scale, dtype=g.dtype)
        gq = gs @ k.data if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv

    return make_result(out, (q, k, v), backward)


# -- normalisation -------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params {gamma.shape}/{beta.shape} vs {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xh * (gh * xh).mean(axis=-1, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


# -- convolution and resampling -------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(f"conv2d: output size not exact for input {h}x{w}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {cout} output channels")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return make_result(out, inputs, backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size {h}x{w} is not even")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
        return (gx,)

    return make_result(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {table.shape[0]}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_result(table.data[ids], (table,), backward)
