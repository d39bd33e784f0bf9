"""Character-conditioned latent diffusion at toy scale.

A small latent-diffusion backbone (VAE, text encoder, UNet) trained from
scratch on procedural sprites, plus a character encoder that appends
identity rows to the text hidden states the UNet cross-attends over.
"""

__version__ = "0.1.0"
