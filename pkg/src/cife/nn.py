"""Parameter records and the building blocks shared by every network.

A parameter record is a plain ``dict`` from dotted name to :class:`Tensor`.
Networks are pure functions of (inputs, record). Initialisation draws each
tensor from its own random stream keyed by ``(seed, name)``, so adding a
parameter never perturbs the others.
"""

from __future__ import annotations

import hashlib
import math
from typing import Dict, Iterable, Optional

import numpy as np

from . import rng
from .numerics import Tensor
from .numerics import ops

Params = Dict[str, Tensor]

GROUPS = 8


class ParamInit:
    """Collects freshly initialised parameters under a common prefix."""

    def __init__(self, seed: int, prefix: str = "", dtype=np.float32):
        self.seed = seed
        self.prefix = prefix
        self.dtype = dtype
        self.params: Params = {}

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def normal(self, name: str, shape, std: float) -> None:
        full = self._full(name)
        data = rng.generator(self.seed, full).standard_normal(shape) * std
        self.params[full] = Tensor(data.astype(self.dtype), name=full)

    def const(self, name: str, shape, value: float = 0.0) -> None:
        full = self._full(name)
        self.params[full] = Tensor(np.full(shape, value, dtype=self.dtype), name=full)

    def conv(self, name: str, cin: int, cout: int, k: int = 3, zero: bool = False) -> None:
        if zero:
            self.const(f"{name}.weight", (cout, cin, k, k))
        else:
            self.normal(f"{name}.weight", (cout, cin, k, k), math.sqrt(2.0 / (cin * k * k)))
        self.const(f"{name}.bias", (cout,))

    def linear(self, name: str, din: int, dout: int, zero: bool = False, gain: float = 1.0) -> None:
        if zero:
            self.const(f"{name}.weight", (dout, din))
        else:
            self.normal(f"{name}.weight", (dout, din), gain / math.sqrt(din))
        self.const(f"{name}.bias", (dout,))

    def norm(self, name: str, c: int) -> None:
        self.const(f"{name}.gamma", (c,), 1.0)
        self.const(f"{name}.beta", (c,), 0.0)

    def resblock(self, name: str, cin: int, cout: int, temb: Optional[int] = None) -> None:
        self.norm(f"{name}.norm1", cin)
        self.conv(f"{name}.conv1", cin, cout)
        if temb is not None:
            self.linear(f"{name}.temb", temb, cout)
        self.norm(f"{name}.norm2", cout)
        self.conv(f"{name}.conv2", cout, cout, zero=False)
        if cin != cout:
            self.conv(f"{name}.skip", cin, cout, k=1)

    def cross_attention(self, name: str, channels: int, cond_width: int, inner: int, zero_out: bool = False) -> None:
        self.norm(f"{name}.norm", channels)
        self.linear(f"{name}.q", channels, inner)
        self.linear(f"{name}.k", cond_width, inner)
        self.linear(f"{name}.v", cond_width, inner)
        self.linear(f"{name}.out", inner, channels, zero=zero_out)

    def transformer_block(self, name: str, width: int, hidden: int, zero_out: bool = False) -> None:
        self.norm(f"{name}.ln1", width)
        self.linear(f"{name}.qkv", width, 3 * width)
        self.linear(f"{name}.proj", width, width, zero=zero_out)
        self.norm(f"{name}.ln2", width)
        self.linear(f"{name}.fc1", width, hidden)
        self.linear(f"{name}.fc2", hidden, width, zero=zero_out)


# -- forward blocks ------------------------------------------------------------

def conv(p: Params, name: str, x: Tensor, padding: Optional[int] = None) -> Tensor:
    w = p[f"{name}.weight"]
    pad = w.shape[-1] // 2 if padding is None else padding
    return ops.conv2d(x, w, p[f"{name}.bias"], stride=1, padding=pad)


def dense(p: Params, name: str, x: Tensor) -> Tensor:
    return ops.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def gnorm(p: Params, name: str, x: Tensor, groups: int = GROUPS) -> Tensor:
    return ops.group_norm(x, min(groups, x.shape[1]), p[f"{name}.gamma"], p[f"{name}.beta"])


def lnorm(p: Params, name: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def resblock(p: Params, name: str, x: Tensor, temb: Optional[Tensor] = None) -> Tensor:
    h = conv(p, f"{name}.conv1", ops.silu(gnorm(p, f"{name}.norm1", x)))
    if temb is not None:
        t = dense(p, f"{name}.temb", temb)
        h = ops.add(h, ops.reshape(t, t.shape + (1, 1)))
    h = conv(p, f"{name}.conv2", ops.silu(gnorm(p, f"{name}.norm2", h)))
    skip = conv(p, f"{name}.skip", x) if f"{name}.skip.weight" in p else x
    return ops.add(h, skip)


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, width = x.shape
    x = ops.reshape(x, (n, length, heads, width // heads))
    x = ops.transpose(x, (0, 2, 1, 3))
    return ops.reshape(x, (n * heads, length, width // heads))


def merge_heads(x: Tensor, heads: int) -> Tensor:
    nh, length, dh = x.shape
    n = nh // heads
    x = ops.reshape(x, (n, heads, length, dh))
    x = ops.transpose(x, (0, 2, 1, 3))
    return ops.reshape(x, (n, length, heads * dh))


def cross_attention(p: Params, name: str, x: Tensor, cond: Tensor, heads: int) -> Tensor:
    """Residual cross-attention of a feature map over a condition sequence.

    ``x`` is (N, C, H, W); ``cond`` is (N, L, D) with any L >= 1.
    """
    n, c, h, w = x.shape
    if cond.ndim != 3 or cond.shape[0] != n:
        raise ops.ShapeError(f"cross_attention: condition {cond.shape} vs batch {n}")
    tokens = ops.transpose(ops.reshape(gnorm(p, f"{name}.norm", x), (n, c, h * w)), (0, 2, 1))
    q = split_heads(dense(p, f"{name}.q", tokens), heads)
    k = split_heads(dense(p, f"{name}.k", cond), heads)
    v = split_heads(dense(p, f"{name}.v", cond), heads)
    att = merge_heads(ops.scaled_dot_attention(q, k, v), heads)
    out = dense(p, f"{name}.out", att)
    out = ops.reshape(ops.transpose(out, (0, 2, 1)), (n, c, h, w))
    return ops.add(x, out)


def transformer_block(p: Params, name: str, x: Tensor, heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    n, length, width = x.shape
    qkv = dense(p, f"{name}.qkv", lnorm(p, f"{name}.ln1", x))
    q = split_heads(qkv[:, :, :width], heads)
    k = split_heads(qkv[:, :, width:2 * width], heads)
    v = split_heads(qkv[:, :, 2 * width:], heads)
    att = merge_heads(ops.scaled_dot_attention(q, k, v, mask=mask), heads)
    x = ops.add(x, dense(p, f"{name}.proj", att))
    hidden = ops.silu(dense(p, f"{name}.fc1", lnorm(p, f"{name}.ln2", x)))
    return ops.add(x, dense(p, f"{name}.fc2", hidden))


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e9, dtype=np.float64), k=1)


# -- record utilities ----------------------------------------------------------

def subset(params: Params, prefix: str) -> Params:
    dot = prefix + "."
    return {k: v for k, v in params.items() if k.startswith(dot)}


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), name=k) for k, v in params.items()}


def as_dtype(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), name=k) for k, v in params.items()}


def params_digest(params: Params, names: Optional[Iterable[str]] = None) -> str:
    """SHA-256 over sorted names, shapes and little-endian bytes."""
    h = hashlib.sha256()
    for key in sorted(params if names is None else names):
        arr = params[key].data
        h.update(key.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def sinusoidal_embedding(t: np.ndarray, width: int, dtype=np.float32) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)
