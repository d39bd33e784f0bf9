"""Finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol_rel: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol_rel


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol_rel: float = 1e-4,
    abs_floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    Params must be f64. The relative error denominator is floored at
    ``abs_floor`` so entries whose true gradient is ~0 do not blow up the
    ratio. ``max_entries`` subsamples coordinates per parameter for large
    tensors.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.requires_grad = True
    with Tape() as tape:
        loss = f(params)
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss must be a finite scalar")
    analytic = tape.gradient(loss, params)

    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, count = 0.0, 0.0, 0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(params).data)
            flat[i] = orig - h
            down = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("grad_check: non-finite loss under perturbation")
            fd = (up - down) / (2 * h)
            an = float(g.reshape(-1)[i])
            worst_abs = max(worst_abs, abs(fd - an))
            worst_rel = max(worst_rel, float(_rel_error(np.array(an), np.array(fd), abs_floor)))
            count += 1
    return GradCheckReport(worst_rel, worst_abs, count, tol_rel)
