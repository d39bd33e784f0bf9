"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)``: the triple is
hashed into a Philox key, so results do not depend on call order or on how
many other draws happened before.
"""

from __future__ import annotations

import zlib

import numpy as np


def _stream_id(stream: str | int) -> int:
    if isinstance(stream, int):
        return stream
    return zlib.crc32(stream.encode("utf-8"))


def generator(seed: int, stream: str | int = 0, counter: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence([int(seed), _stream_id(stream), int(counter)])
    return np.random.Generator(np.random.Philox(ss))


def normal(seed: int, stream: str | int, counter: int, shape, dtype=np.float32) -> np.ndarray:
    return generator(seed, stream, counter).standard_normal(shape).astype(dtype)
