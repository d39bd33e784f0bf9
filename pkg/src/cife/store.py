"""On-disk layout of trained components.

A backbone is a directory holding ``vae.cife``, ``text.cife`` and
``unet.cife``; an encoder is a single bundle tagged ``encoder:<variant>``.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

from . import checkpoint
from .backbone.text import init_text_encoder
from .backbone.unet import init_unet
from .backbone.vae import init_vae
from .character_encoder import VariantKind, init_character_encoder, variant_of
from .nn import Params


class MissingPrerequisite(FileNotFoundError):
    """A required input checkpoint is absent; the message names the producing command."""


_INITS = {"vae": init_vae, "text": init_text_encoder, "unet": init_unet}
_MAKERS = {"vae": "train-vae", "text": "train-backbone", "unet": "train-backbone"}


def expected_names(tag: str, k: int = 4) -> set:
    if tag in _INITS:
        return set(_INITS[tag](0))
    variant = VariantKind.parse(tag.split(":", 1)[1])
    return set(init_character_encoder(0, variant, k))


def encoder_tag(enc: Params) -> str:
    return f"encoder:{variant_of(enc).value}"


def save_component(path, params: Params, tag: str, metadata: Optional[dict] = None) -> str:
    return checkpoint.save(path, params, tag, metadata)


def load_component(path, tag: str, command: Optional[str] = None) -> Params:
    path = Path(path)
    if not path.exists():
        hint = command or _MAKERS.get(tag, "train-encoder")
        raise MissingPrerequisite(f"{path} not found; produce it first with `cife {hint}`")
    params, _, _ = checkpoint.load(path, tag, expected_names(tag))
    return params


def save_backbone(directory, backbone: dict, metadata: Optional[dict] = None) -> dict:
    """Write the three component bundles; returns their file hashes."""
    directory = Path(directory)
    return {tag: checkpoint.save(directory / f"{tag}.cife", backbone[tag], tag, metadata)
            for tag in ("vae", "text", "unet")}


def load_backbone(directory, need=("vae", "text", "unet")) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingPrerequisite(f"backbone directory {directory} not found; run `cife train-backbone` first")
    return {tag: load_component(directory / f"{tag}.cife", tag) for tag in need}


def backbone_hash(directory) -> str:
    """Combined digest of a backbone directory (order-fixed concatenation of file hashes)."""
    directory = Path(directory)
    h = hashlib.sha256()
    for name in checkpoint.BACKBONE_FILES:
        h.update(checkpoint.file_hash(directory / name).encode("ascii"))
    return h.hexdigest()


def save_encoder(path, enc: Params, metadata: Optional[dict] = None) -> str:
    return checkpoint.save(path, enc, encoder_tag(enc), metadata)


def load_encoder(path) -> Params:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; produce it first with `cife train-encoder`")
    params, tag, _ = checkpoint.load(path)
    if not tag.startswith("encoder:"):
        raise checkpoint.ComponentError(f"expected an encoder bundle, found {tag!r}")
    k = params["enc.deep.fc2.weight"].shape[0] // 64 if "enc.deep.fc2.weight" in params else 4
    expected = expected_names(tag, k)
    if set(params) != expected:
        raise checkpoint.NameSetError(f"encoder parameter names do not match the {tag} architecture")
    return params
