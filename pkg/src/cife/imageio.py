"""PNG read/write for (3, H, W) float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(image: np.ndarray, path) -> None:
    # no metadata chunks, fixed compression: byte-identical files for identical pixels
    Image.fromarray(to_uint8(image), mode="RGB").save(Path(path), format="PNG", compress_level=6)


def load_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.clip(arr.transpose(2, 0, 1), 0.0, 1.0)


def contact_sheet(images, columns: int = 8, pad: int = 1) -> np.ndarray:
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("no images for contact sheet")
    c, h, w = images[0].shape
    rows = (len(images) + columns - 1) // columns
    sheet = np.ones((c, rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=np.float32)
    for i, im in enumerate(images):
        r, col = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        sheet[:, y:y + h, x:x + w] = im
    return sheet
