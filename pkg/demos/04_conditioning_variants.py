"""How a reference image becomes extra condition rows, for each encoder variant.

    python demos/04_conditioning_variants.py
"""
import numpy as np

from cife.backbone.text import init_text_encoder, text_encode, tokenize_batch
from cife.backbone.unet import init_unet, unet_forward
from cife.character_encoder import compose_conditions, encode_reference, init_character_encoder
from cife.dataset import Identity, SpriteSpec, render_sprite
from cife.numerics import Tensor



def perturb(params, seed, scale):
    """Untrained weights with a little noise, so zero-initialised layers do something."""
    g = np.random.default_rng(seed)
    return {k: Tensor(v.data + scale * g.standard_normal(v.shape).astype(v.data.dtype)) for k, v in params.items()}


ref = render_sprite(SpriteSpec(Identity(5, "square", "none", 0)))[None]
text = text_encode(tokenize_batch(["a sprite at center middle large turned upright on slate background"]), init_text_encoder(0)).data
print("text rows", text.shape)

unet = perturb(init_unet(0), 1, 0.05)
x, t = np.zeros((1, 4, 8, 8), np.float32), np.array([100])
plain = unet_forward(x, t, text, unet).data

for i, variant in enumerate(("same-place", "mix", "autoencoder")):
    enc = perturb(init_character_encoder(0, variant), 2 + i, 0.05)
    rows = encode_reference(ref, enc)
    cond = compose_conditions(text, rows, variant, enc).data
    out = unet_forward(x, t, cond, unet).data
    print(f"{variant:12s} condition {cond.shape}  text prefix kept: {np.array_equal(cond[:, :16], text)!s:5}  "
          f"UNet output moved by {np.linalg.norm(out - plain):.3f}")

# A fresh encoder has a zero final layer: its rows are zeros, and the mixer is an exact identity.
fresh = init_character_encoder(0, "mix")
rows = encode_reference(ref, fresh).data
print("fresh encoder rows all zero:", bool(np.all(rows == 0)))
cond = compose_conditions(text, rows, "mix", fresh).data
print("fresh mixer == concatenation:", float(np.abs(cond - np.concatenate([text, rows], 1)).max()) <= 1e-6)

for L in (16, 17, 20, 48):
    cond = np.concatenate([text, np.random.default_rng(L).standard_normal((1, L - 16, 64)).astype(np.float32)], 1)
    print(f"UNet accepts L={L}: output {unet_forward(x, t, cond, unet).shape}")
