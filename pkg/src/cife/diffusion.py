"""Forward noising, the noise-prediction objective and the DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng
from .backbone.unet import unet_forward
from .backbone.vae import LATENT_SHAPE
from .nn import Params
from .numerics import Tensor, as_tensor
from .numerics import ops

DEFAULT_T = 200
DEFAULT_STEPS = 20


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to and including ``t``; index -1 means 1.0."""
        return 1.0 if t < 0 else float(self.alpha_bars[t])


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start < 1 or not 0 < beta_end < 1 or (T > 1 and beta_start >= beta_end):
        raise ValueError(f"invalid beta bounds ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """Linear 1e-4..0.02 schedule rescaled from 1000 steps to ``T``."""
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, 0.02 * scale)


def add_noise(x0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with per-sample ``t`` allowed."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timestep outside [0, {sched.T})")
    ab = sched.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def training_noise(seed: int, counter: int, n: int, T: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Timesteps and Gaussian noise for one batch, keyed by ``(seed, counter)``."""
    t = rng.generator(seed, "diffusion.t", counter).integers(0, T, size=n)
    eps = rng.normal(seed, "diffusion.eps", counter, (n,) + LATENT_SHAPE, dtype=dtype)
    return t, eps


def diffusion_loss(x0: np.ndarray, cond, t, eps_seed: int, params: Params, sched: NoiseSchedule,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    """MSE between the UNet's noise prediction and the noise actually added."""
    x0 = np.asarray(x0)
    if eps is None:
        eps = rng.normal(eps_seed, "diffusion.eps", 0, x0.shape, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, sched)
    pred = unet_forward(Tensor(x_t), t, cond, params)
    return ops.mse(pred, eps)


def timestep_subsequence(T: int, steps: int) -> np.ndarray:
    """``steps`` evenly spaced indices from T-1 down to 0 (just [T-1] for one step)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)


EpsModel = Callable[[np.ndarray, int], np.ndarray]


def initial_noise(seeds, dtype=np.float32) -> np.ndarray:
    return np.stack([rng.normal(int(s), "ddim.x_T", 0, LATENT_SHAPE, dtype=dtype) for s in seeds])


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule,
              eta: float = 0.0, z: Optional[np.ndarray] = None) -> np.ndarray:
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = 0.0
    if eta > 0:
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    x_prev = np.sqrt(ab_prev) * x0_hat + direction
    if sigma > 0:
        x_prev = x_prev + sigma * z
    return x_prev.astype(x_t.dtype)


def ddim_sample(cond, config: SamplerConfig, params: Optional[Params], sched: NoiseSchedule,
                eps_model: Optional[EpsModel] = None, x_T: Optional[np.ndarray] = None,
                sample_seeds=None) -> np.ndarray:
    """Deterministic (eta=0) DDIM from seeded Gaussian latents.

    ``cond`` is (N, L, 64) or (L, 64). Each batch row starts from its own
    seed (``sample_seeds``, default ``config.seed + i``). ``eps_model``
    replaces the UNet, e.g. with an oracle noise predictor.
    """
    if config.steps > sched.T:
        raise ValueError(f"steps {config.steps} exceeds T={sched.T}")
    cond_arr = None
    if cond is not None:
        cond_arr = as_tensor(cond).data
        if cond_arr.ndim == 2:
            cond_arr = cond_arr[None]
    if x_T is None:
        n = cond_arr.shape[0] if cond_arr is not None else 1
        if sample_seeds is None:
            sample_seeds = [config.seed + i for i in range(n)]
        x_T = initial_noise(sample_seeds)
    x = np.array(x_T, copy=True)
    if eps_model is None:
        cond_t = Tensor(cond_arr)

        def eps_model(x_t, t):
            return unet_forward(Tensor(x_t), np.full(x_t.shape[0], t), cond_t, params).data

    seq = timestep_subsequence(sched.T, config.steps)
    for i, t in enumerate(seq):
        t_prev = int(seq[i + 1]) if i + 1 < len(seq) else -1
        eps_hat = eps_model(x, int(t))
        z = None
        if config.eta > 0:
            z = rng.normal(config.seed, "ddim.z", i, x.shape, dtype=x.dtype)
        x = ddim_step(x, eps_hat, int(t), t_prev, sched, config.eta, z)
    return x
