"""Cross-attention UNet noise predictor over 4x8x8 latents.

Layout: conv_in -> [8x8: res + xattn] -> pool -> [4x4: res + xattn]
-> mid [res + xattn] -> [4x4: cat skip, res + xattn] -> upsample
-> [8x8: cat skip, res + xattn] -> norm/silu/conv_out (zero-init).
Every cross-attention block sees the whole condition sequence, whatever
its length.
"""

from __future__ import annotations

import numpy as np

from ..nn import Params, ParamInit, conv, cross_attention, dense, gnorm, resblock, sinusoidal_embedding
from ..numerics import Tensor, as_tensor
from ..numerics import ops
from .text import WIDTH as COND_WIDTH
from .vae import LATENT_SHAPE

TIME_WIDTH = 64
TEMB = 128
HEADS = 4
ATTN_INNER = 64
C1, C2 = 32, 64


def init_unet(seed: int) -> Params:
    init = ParamInit(seed, "unet")
    init.linear("time.fc1", TIME_WIDTH, TEMB)
    init.linear("time.fc2", TEMB, TEMB)
    init.conv("conv_in", LATENT_SHAPE[0], C1)
    init.resblock("down1.res", C1, C1, TEMB)
    init.cross_attention("down1.attn", C1, COND_WIDTH, ATTN_INNER)
    init.resblock("down2.res", C1, C2, TEMB)
    init.cross_attention("down2.attn", C2, COND_WIDTH, ATTN_INNER)
    init.resblock("mid.res", C2, C2, TEMB)
    init.cross_attention("mid.attn", C2, COND_WIDTH, ATTN_INNER)
    init.resblock("up2.res", 2 * C2, C2, TEMB)
    init.cross_attention("up2.attn", C2, COND_WIDTH, ATTN_INNER)
    init.resblock("up1.res", C2 + C1, C1, TEMB)
    init.cross_attention("up1.attn", C1, COND_WIDTH, ATTN_INNER)
    init.norm("norm_out", C1)
    init.conv("conv_out", C1, LATENT_SHAPE[0], zero=True)
    return init.params


def unet_forward(x_t, t, cond, p: Params) -> Tensor:
    """Predict the noise in ``x_t`` (N,4,8,8) at timesteps ``t`` given ``cond`` (N,L,64)."""
    x = as_tensor(x_t)
    cond = as_tensor(cond)
    if x.ndim != 4 or x.shape[1:] != LATENT_SHAPE:
        raise ops.ShapeError(f"expected latents (N, 4, 8, 8), got {x.shape}")
    if cond.ndim == 2:
        cond = ops.reshape(cond, (1,) + cond.shape)
    if cond.ndim != 3 or cond.shape[-1] != COND_WIDTH:
        raise ops.ShapeError(f"condition must have width {COND_WIDTH}, got shape {cond.shape}")
    if cond.shape[1] < 1:
        raise ops.ShapeError("condition sequence is empty")
    if cond.shape[0] != x.shape[0]:
        raise ops.ShapeError(f"condition batch {cond.shape[0]} != latent batch {x.shape[0]}")
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t).reshape(-1), (n,))

    temb = Tensor(sinusoidal_embedding(t, TIME_WIDTH, dtype=x.dtype))
    temb = dense(p, "unet.time.fc2", ops.silu(dense(p, "unet.time.fc1", temb)))
    temb = ops.silu(temb)

    h = conv(p, "unet.conv_in", x)
    h1 = cross_attention(p, "unet.down1.attn", resblock(p, "unet.down1.res", h, temb), cond, HEADS)
    h = ops.avg_pool2(h1)
    h2 = cross_attention(p, "unet.down2.attn", resblock(p, "unet.down2.res", h, temb), cond, HEADS)
    h = cross_attention(p, "unet.mid.attn", resblock(p, "unet.mid.res", h2, temb), cond, HEADS)
    h = ops.concat([h, h2], axis=1)
    h = cross_attention(p, "unet.up2.attn", resblock(p, "unet.up2.res", h, temb), cond, HEADS)
    h = ops.upsample2(h)
    h = ops.concat([h, h1], axis=1)
    h = cross_attention(p, "unet.up1.attn", resblock(p, "unet.up1.res", h, temb), cond, HEADS)
    return conv(p, "unet.conv_out", ops.silu(gnorm(p, "unet.norm_out", h)))
