"""Miniature latent-diffusion backbone: VAE, text encoder, cross-attention UNet."""

from .text import (
    PAD_ID,
    START_ID,
    TEXT_LENGTH,
    VOCAB_SIZE,
    WIDTH,
    encode_prompts,
    init_text_encoder,
    text_encode,
    tokenize,
    tokenize_batch,
)
from .unet import init_unet, unet_forward
from .vae import (
    IMAGE_SHAPE,
    LATENT_SHAPE,
    from_diffusion_latent,
    init_vae,
    to_diffusion_latent,
    kl_divergence,
    psnr,
    vae_decode,
    vae_encode,
    vae_loss,
)

__all__ = [
    "IMAGE_SHAPE",
    "LATENT_SHAPE",
    "PAD_ID",
    "START_ID",
    "TEXT_LENGTH",
    "VOCAB_SIZE",
    "WIDTH",
    "encode_prompts",
    "init_text_encoder",
    "from_diffusion_latent",
    "init_unet",
    "init_vae",
    "kl_divergence",
    "psnr",
    "text_encode",
    "to_diffusion_latent",
    "tokenize",
    "tokenize_batch",
    "unet_forward",
    "vae_decode",
    "vae_encode",
    "vae_loss",
]
