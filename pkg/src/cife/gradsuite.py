"""Finite-difference audit of every differentiable op plus end-to-end losses.

Each case builds float64 inputs, reduces the op output with a fixed random
weighting (so every output element matters) and hands the scalar to
:func:`~cife.numerics.grad_check`.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import GradCheckReport, Tensor, grad_check
from .numerics import ops

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(name.encode("utf-8")))


def _weighted(out: Tensor, name: str) -> Tensor:
    w = _rng(name + ".w").standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(w)))


def _tensors(name: str, *shapes) -> list:
    g = _rng(name)
    return [Tensor(g.standard_normal(s)) for s in shapes]


def _op_cases() -> dict:
    mask = np.triu(np.full((4, 4), -1e9), 1)
    return {
        "add": (lambda a, b: ops.add(a, b), [(3, 4), (4,)]),
        "sub": (lambda a, b: ops.sub(a, b), [(3, 4), (3, 4)]),
        "mul": (lambda a, b: ops.mul(a, b), [(2, 3, 4), (2, 3, 4)]),
        "square": (ops.square, [(3, 5)]),
        "exp": (ops.exp, [(3, 5)]),
        "sigmoid": (ops.sigmoid, [(3, 5)]),
        "silu": (ops.silu, [(3, 5)]),
        "tanh": (ops.tanh, [(3, 5)]),
        "reshape": (lambda a: ops.reshape(a, (6, 2)), [(3, 4)]),
        "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 3, 4), (2, 2, 4)]),
        "getitem": (lambda a: a[:, 1:3], [(3, 4)]),
        "sum": (lambda a: ops.sum(a, axis=1, keepdims=True), [(3, 4)]),
        "mean": (lambda a: ops.mean(a, axis=0), [(3, 4)]),
        "mse": (lambda a: ops.mse(a, np.linspace(-1, 1, 12).reshape(3, 4)), [(3, 4)]),
        "matmul": (ops.matmul, [(2, 3, 4), (2, 4, 5)]),
        "linear": (ops.linear, [(3, 6), (4, 6), (4,)]),
        "softmax": (lambda a: ops.softmax(a, -1), [(3, 5)]),
        "attention": (ops.scaled_dot_attention, [(2, 3, 8), (2, 5, 8), (2, 5, 8)]),
        "attention_masked": (lambda q, k, v: ops.scaled_dot_attention(q, k, v, mask), [(2, 4, 4)] * 3),
        "layer_norm": (ops.layer_norm, [(3, 8), (8,), (8,)]),
        "group_norm": (lambda x, g, b: ops.group_norm(x, 2, g, b), [(2, 4, 3, 3), (4,), (4,)]),
        "conv2d": (lambda x, k, b: ops.conv2d(x, k, b, 1, 1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        "conv2d_stride2": (lambda x, k: ops.conv2d(x, k, None, 2, 1), [(1, 2, 6, 6), (3, 2, 4, 4)]),
        "avg_pool2": (ops.avg_pool2, [(2, 3, 4, 4)]),
        "upsample2": (ops.upsample2, [(2, 3, 2, 3)]),
        "embedding": (lambda t: ops.embedding(np.array([[0, 2, 2], [4, 1, 0]]), t), [(5, 3)]),
    }


def _jitter(params: dict, name: str, scale: float = 0.05) -> dict:
    """f64 copy with every tensor nudged so zero-initialised layers carry signal."""
    g = _rng(name)
    out = {}
    for k in sorted(params):
        data = params[k].data.astype(np.float64)
        out[k] = Tensor(data + scale * g.standard_normal(data.shape))
    return out


def _end_to_end(variant: str) -> tuple[Callable, list]:
    from .backbone.unet import init_unet
    from .character_encoder import compose_conditions, encode_reference, init_character_encoder
    from .diffusion import add_noise, default_schedule

    name = f"e2e.{variant}"
    params = _jitter({**init_unet(3), **init_character_encoder(4, variant)}, name)
    g = _rng(name + ".data")
    refs = g.uniform(0, 1, (2, 3, 32, 32))
    text = g.standard_normal((2, 16, 64))
    x0 = g.standard_normal((2, 4, 8, 8))
    eps = g.standard_normal((2, 4, 8, 8))
    t = np.array([20, 150])
    x_t = add_noise(x0, eps, t, default_schedule())
    names = sorted(params)

    def f(ps):
        from .backbone.unet import unet_forward
        p = dict(zip(names, ps))
        cond = compose_conditions(Tensor(text), encode_reference(Tensor(refs), p), variant, p)
        return ops.mse(unet_forward(Tensor(x_t), t, cond, p), eps)

    return f, [params[n] for n in names]


def run_suite(include_end_to_end: bool = True, entries_per_tensor: int = 2) -> list[CaseResult]:
    results = []
    for name, (fn, shapes) in _op_cases().items():
        inputs = _tensors(name, *shapes)
        start = time.perf_counter()
        rep = grad_check(lambda ps, fn=fn, name=name: _weighted(fn(*ps), name), inputs, tol_rel=TOLERANCE)
        results.append(CaseResult(name, rep, time.perf_counter() - start))
    if include_end_to_end:
        for variant in ("same-place", "mix"):
            f, params = _end_to_end(variant)
            start = time.perf_counter()
            rep = grad_check(f, params, tol_rel=TOLERANCE, max_entries=entries_per_tensor, seed=7)
            results.append(CaseResult(f"encoder+unet[{variant}]", rep, time.perf_counter() - start))
    return results


def format_table(results: list[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max_rel_err':>11}  {'checked':>7}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.report.max_rel_error:11.3e}  {r.report.n_checked:7d}  {status}")
    return "\n".join(lines)
