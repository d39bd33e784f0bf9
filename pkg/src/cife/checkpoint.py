"""Checkpoint container.

Layout (all integers little-endian)::

    b"CIFE" | u16 version | u16 len + tag | u32 len + metadata JSON
    | u32 count | count x (u16 len + name | u8 dtype | u8 ndim | ndim x u32 | raw data)
    | sha256 of everything above

Entries are sorted by name so identical parameters give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .nn import Params
from .numerics import Tensor

MAGIC = b"CIFE"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

BACKBONE_FILES = ("vae.cife", "text.cife", "unet.cife")


class CheckpointError(Exception):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class ComponentError(CheckpointError):
    pass


class NameSetError(CheckpointError):
    pass


def serialize(params: Params, tag: str, metadata: Optional[dict] = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tag_b = tag.encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<H", len(tag_b)), tag_b,
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        name_b = name.encode("utf-8")
        parts += [struct.pack("<H", len(name_b)), name_b, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def deserialize(data: bytes, expected_tag: Optional[str] = None,
                expected_names: Optional[Iterable[str]] = None) -> tuple[Params, str, dict]:
    if data[:4] != MAGIC:
        raise MagicError("not a CIFE checkpoint (bad magic bytes)")
    if len(data) < 4 + 2 + 32:
        raise IntegrityError("checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint hash mismatch (file corrupted)")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    pos = 6
    (n,) = struct.unpack_from("<H", body, pos)
    pos += 2
    tag = body[pos:pos + n].decode("utf-8")
    pos += n
    if expected_tag is not None and tag != expected_tag:
        raise ComponentError(f"expected component {expected_tag!r}, found {tag!r}")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    metadata = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: Params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        size = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += size
        params[name] = Tensor(arr.astype(dtype.newbyteorder("=")), name=name)
    if expected_names is not None:
        expected = set(expected_names)
        if set(params) != expected:
            missing = sorted(expected - set(params))[:5]
            extra = sorted(set(params) - expected)[:5]
            raise NameSetError(f"parameter names do not match architecture (missing {missing}, unexpected {extra})")
    return params, tag, metadata


def save(path, params: Params, tag: str, metadata: Optional[dict] = None) -> str:
    data = serialize(params, tag, metadata)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path, expected_tag: Optional[str] = None, expected_names=None) -> tuple[Params, str, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return deserialize(path.read_bytes(), expected_tag, expected_names)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(params: Params, tag: str) -> str:
    """Hash of the serialised parameters with empty metadata."""
    return hashlib.sha256(serialize(params, tag)).hexdigest()
