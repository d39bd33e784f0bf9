"""Character image feature encoder.

A reference image goes through a small conv feature extractor (four
conv/norm/SiLU/pool stages, 3x32x32 -> 64x2x2 -> 256 features) and a deep
linear encoder that emits ``K`` condition rows of the backbone's hidden
width. Those rows are joined to the text hidden states in one of three ways
(:class:`VariantKind`).
"""

from __future__ import annotations

import enum
from typing import Optional

import numpy as np

from .backbone.text import WIDTH
from .nn import Params, ParamInit, conv, cross_attention, dense, gnorm, transformer_block
from .numerics import Tensor, as_tensor
from .numerics import ops

FEATURE_CHANNELS = (3, 16, 32, 64, 64)
FEATURE_DIM = 256
HIDDEN = 128
DEFAULT_K = 4
MIXER_BLOCKS = 2
MIXER_HEADS = 4
AE_SEED_SHAPE = (4, 2, 2)
AE_HEADS = 4


class VariantKind(str, enum.Enum):
    MIX = "mix"
    SAME_PLACE = "same-place"
    AUTOENCODER = "autoencoder"

    @classmethod
    def parse(cls, value) -> "VariantKind":
        if isinstance(value, cls):
            return value
        aliases = {"mixencoder": cls.MIX, "mix-encoder": cls.MIX, "sameplace": cls.SAME_PLACE,
                   "same_place": cls.SAME_PLACE, "ae": cls.AUTOENCODER}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


def init_character_encoder(seed: int, variant, k: int = DEFAULT_K) -> Params:
    variant = VariantKind.parse(variant)
    if k < 1:
        raise ValueError("need at least one character row")
    init = ParamInit(seed, "enc")
    for i in range(4):
        init.conv(f"features.conv{i}", FEATURE_CHANNELS[i], FEATURE_CHANNELS[i + 1])
        init.norm(f"features.norm{i}", FEATURE_CHANNELS[i + 1])
    init.linear("deep.fc0", FEATURE_DIM, HIDDEN)
    init.linear("deep.fc1", HIDDEN, HIDDEN)
    init.linear("deep.fc2", HIDDEN, k * WIDTH, zero=True)
    if variant is VariantKind.MIX:
        for i in range(MIXER_BLOCKS):
            init.transformer_block(f"mixer.block{i}", WIDTH, 2 * WIDTH, zero_out=True)
    elif variant is VariantKind.AUTOENCODER:
        init.normal("aedec.seed", AE_SEED_SHAPE, 1.0)
        init.conv("aedec.conv0", AE_SEED_SHAPE[0], 64)
        init.norm("aedec.norm0", 64)
        init.cross_attention("aedec.attn0", 64, WIDTH, 64)
        init.conv("aedec.conv1", 64, 64)
        init.norm("aedec.norm1", 64)
        init.cross_attention("aedec.attn1", 64, WIDTH, 64)
        init.conv("aedec.conv2", 64, 32)
        init.norm("aedec.norm2", 32)
        init.cross_attention("aedec.attn2", 32, WIDTH, 64)
        init.conv("aedec.conv3", 32, 16)
        init.norm("aedec.norm3", 16)
        init.conv("aedec.conv4", 16, 16)
        init.norm("aedec.norm4", 16)
        init.conv("aedec.out", 16, 3)
    return init.params


def encoder_rows(p: Params) -> int:
    return p["enc.deep.fc2.weight"].shape[0] // WIDTH


def variant_of(p: Params) -> VariantKind:
    if any(k.startswith("enc.mixer.") for k in p):
        return VariantKind.MIX
    if any(k.startswith("enc.aedec.") for k in p):
        return VariantKind.AUTOENCODER
    return VariantKind.SAME_PLACE


def extract_features(images, p: Params) -> Tensor:
    """(N, 3, 32, 32) reference images -> (N, 256) features."""
    x = as_tensor(images)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
        raise ops.ShapeError(f"reference images must be (N, 3, 32, 32), got {x.shape}")
    for i in range(4):
        x = ops.silu(gnorm(p, f"enc.features.norm{i}", conv(p, f"enc.features.conv{i}", x)))
        x = ops.avg_pool2(x)
    return ops.reshape(x, (x.shape[0], FEATURE_DIM))


def encode_character(features: Tensor, p: Params) -> Tensor:
    """(N, 256) features -> (N, K, 64) character rows."""
    if features.shape[-1] != FEATURE_DIM:
        raise ops.ShapeError(f"expected {FEATURE_DIM} features, got {features.shape}")
    h = ops.silu(dense(p, "enc.deep.fc0", features))
    h = ops.silu(dense(p, "enc.deep.fc1", h))
    out = dense(p, "enc.deep.fc2", h)
    return ops.reshape(out, (features.shape[0], encoder_rows(p), WIDTH))


def encode_reference(images, p: Params) -> Tensor:
    return encode_character(extract_features(images, p), p)


def mix(seq: Tensor, p: Params) -> Tensor:
    for i in range(MIXER_BLOCKS):
        seq = transformer_block(p, f"enc.mixer.block{i}", seq, MIXER_HEADS)
    return seq


def compose_conditions(clip_hidden, char: Optional[Tensor], variant, p: Optional[Params] = None) -> Tensor:
    """Join text hidden states (N, L, 64) with character rows (N, K, 64).

    Same-place / autoencoder: plain concatenation, text rows first and
    untouched. Mix: concatenation followed by the mixing transformer.
    ``char=None`` (or K=0) disables the encoder and returns the text rows.
    """
    variant = VariantKind.parse(variant)
    clip_hidden = as_tensor(clip_hidden)
    if variant is VariantKind.MIX and (p is None or "enc.mixer.block0.qkv.weight" not in p):
        raise ValueError("mix variant needs mixer parameters")
    if char is None or char.shape[-2] == 0:
        return clip_hidden
    if char.shape[-1] != clip_hidden.shape[-1]:
        raise ops.ShapeError(f"character width {char.shape[-1]} != text width {clip_hidden.shape[-1]}")
    if char.shape[0] != clip_hidden.shape[0]:
        raise ops.ShapeError(f"batch mismatch: {char.shape[0]} vs {clip_hidden.shape[0]}")
    seq = ops.concat([clip_hidden, char], axis=1)
    if variant is VariantKind.MIX:
        seq = mix(seq, p)
    return seq


def ae_decode(char: Tensor, clip_hidden, p: Params) -> Tensor:
    """Reconstruct (N, 3, 32, 32) from character rows plus the target's caption states."""
    clip_hidden = as_tensor(clip_hidden)
    cond = ops.concat([char, clip_hidden], axis=1)
    n = cond.shape[0]
    h = ops.add(Tensor(np.zeros((n,) + AE_SEED_SHAPE, dtype=cond.dtype)), p["enc.aedec.seed"])
    h = ops.silu(gnorm(p, "enc.aedec.norm0", conv(p, "enc.aedec.conv0", h)))
    h = cross_attention(p, "enc.aedec.attn0", h, cond, AE_HEADS)
    h = ops.upsample2(h)
    h = ops.silu(gnorm(p, "enc.aedec.norm1", conv(p, "enc.aedec.conv1", h)))
    h = cross_attention(p, "enc.aedec.attn1", h, cond, AE_HEADS)
    h = ops.upsample2(h)
    h = ops.silu(gnorm(p, "enc.aedec.norm2", conv(p, "enc.aedec.conv2", h)))
    h = cross_attention(p, "enc.aedec.attn2", h, cond, AE_HEADS)
    h = ops.upsample2(h)
    h = ops.silu(gnorm(p, "enc.aedec.norm3", conv(p, "enc.aedec.conv3", h)))
    h = ops.upsample2(h)
    h = ops.silu(gnorm(p, "enc.aedec.norm4", conv(p, "enc.aedec.conv4", h)))
    return ops.sigmoid(conv(p, "enc.aedec.out", h))
