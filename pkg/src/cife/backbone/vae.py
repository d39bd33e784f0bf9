"""Image autoencoder mapping 3x32x32 images to 4x8x8 latents."""

from __future__ import annotations

import numpy as np

from .. import rng
from ..nn import Params, ParamInit, conv, gnorm
from ..numerics import Tensor, as_tensor
from ..numerics import ops

IMAGE_SHAPE = (3, 32, 32)
LATENT_SHAPE = (4, 8, 8)


def init_vae(seed: int) -> Params:
    init = ParamInit(seed, "vae")
    init.conv("enc.conv0", 3, 16)
    init.norm("enc.norm0", 16)
    init.conv("enc.conv1", 16, 32)
    init.norm("enc.norm1", 32)
    init.conv("enc.conv2", 32, 64)
    init.norm("enc.norm2", 64)
    init.conv("enc.out", 64, 2 * LATENT_SHAPE[0])
    init.conv("dec.conv0", LATENT_SHAPE[0], 64)
    init.norm("dec.norm0", 64)
    init.conv("dec.conv1", 64, 32)
    init.norm("dec.norm1", 32)
    init.conv("dec.conv2", 32, 16)
    init.norm("dec.norm2", 16)
    init.conv("dec.out", 16, 3)
    # set once after training so diffusion sees roughly unit-variance latents
    init.const("latent_scale", (1,), 1.0)
    return init.params


def _check_images(images: Tensor) -> None:
    if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
        raise ops.ShapeError(f"expected images of shape (N, 3, 32, 32), got {images.shape}")


def encode_moments(images, p: Params) -> tuple[Tensor, Tensor]:
    x = as_tensor(images)
    _check_images(x)
    h = ops.silu(gnorm(p, "vae.enc.norm0", conv(p, "vae.enc.conv0", x)))
    h = ops.avg_pool2(h)
    h = ops.silu(gnorm(p, "vae.enc.norm1", conv(p, "vae.enc.conv1", h)))
    h = ops.avg_pool2(h)
    h = ops.silu(gnorm(p, "vae.enc.norm2", conv(p, "vae.enc.conv2", h)))
    out = conv(p, "vae.enc.out", h)
    c = LATENT_SHAPE[0]
    return out[:, :c], out[:, c:]


def vae_encode(images, p: Params, noise_seed: int = 0, deterministic: bool = False):
    """Returns ``(latent, mu, logvar)``; ``deterministic`` makes latent = mu."""
    mu, logvar = encode_moments(images, p)
    if deterministic:
        return mu, mu, logvar
    eps = rng.normal(noise_seed, "vae.posterior", 0, mu.shape, dtype=mu.dtype)
    std = ops.exp(ops.mul(logvar, 0.5))
    return ops.add(mu, ops.mul(std, Tensor(eps))), mu, logvar


def vae_decode(latent, p: Params) -> Tensor:
    z = as_tensor(latent)
    if z.ndim != 4 or z.shape[1:] != LATENT_SHAPE:
        raise ops.ShapeError(f"expected latents of shape (N, 4, 8, 8), got {z.shape}")
    h = ops.silu(gnorm(p, "vae.dec.norm0", conv(p, "vae.dec.conv0", z)))
    h = ops.upsample2(h)
    h = ops.silu(gnorm(p, "vae.dec.norm1", conv(p, "vae.dec.conv1", h)))
    h = ops.upsample2(h)
    h = ops.silu(gnorm(p, "vae.dec.norm2", conv(p, "vae.dec.conv2", h)))
    return ops.sigmoid(conv(p, "vae.dec.out", h))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """-1/2 * mean(1 + logvar - mu^2 - exp(logvar))."""
    inner = ops.sub(ops.sub(ops.add(logvar, 1.0), ops.square(mu)), ops.exp(logvar))
    return ops.mul(ops.mean(inner), -0.5)


def vae_loss(images, reconstruction: Tensor, mu: Tensor, logvar: Tensor, kl_weight: float) -> Tensor:
    rec = ops.mse(reconstruction, as_tensor(images, like=reconstruction))
    return ops.add(rec, ops.mul(kl_divergence(mu, logvar), kl_weight))


def to_diffusion_latent(mu: np.ndarray, p: Params) -> np.ndarray:
    return mu * p["vae.latent_scale"].data[0]


def from_diffusion_latent(z: np.ndarray, p: Params) -> np.ndarray:
    return z / p["vae.latent_scale"].data[0]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    err = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if err == 0 else 10.0 * np.log10(1.0 / err)
