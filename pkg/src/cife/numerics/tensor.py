"""Dense tensors and the reverse-mode gradient tape.

Recording only happens inside an active :class:`Tape`. Outside a tape every
op is a plain numpy computation, which is what sampling and evaluation use.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active_tapes: list["Tape"] = []
_debug = os.environ.get("CIFE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf validation after every public op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def validate(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor of shape {self.shape}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the functional forms live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    >>> with Tape() as tape:
    ...     loss = ops.sum(ops.mul(w, w))
    >>> tape.backward(loss)     # w.grad now holds 2*w
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Propagate d(loss)/d(.) to every leaf that requires grad.

        Leaf gradients are accumulated into ``.grad`` (which is reset first
        for every leaf touched by this tape).
        """
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward without an explicit seed needs a scalar loss")
            if not np.isfinite(loss.data).all():
                raise FloatingPointError("non-finite loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))

    def gradient(self, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        params = list(params)
        for p in params:
            p.grad = None
        self.backward(loss)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        return [p.grad for p in params]


def recording() -> bool:
    return bool(_active_tapes)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op's output and, when a tape is active, record how to differentiate it."""
    needs = recording() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if _debug:
        out.validate()
    if needs:
        _active_tapes[-1].record(out, tuple(inputs), backward)
    return out
