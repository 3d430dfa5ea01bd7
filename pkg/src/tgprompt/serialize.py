"""Flat binary container of named float64 tensors.

Layout (all integers little-endian)::

    magic  b"TGPK"
    u32    format version
    u32    metadata length, followed by that many bytes of UTF-8 JSON
    u32    tensor count
    per tensor:
        u32 name length, name bytes (UTF-8)
        u32 ndim, then ndim x u64 dimensions
        prod(shape) x f64 values, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TGPK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("not a tensor container (bad magic)")
    pos = 4
    try:
        version, meta_len = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported container version {version}")
        metadata = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise CheckpointFormatError(f"truncated container: tensor {name!r} data")
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            tensors[name] = data.astype(np.float64).reshape(shape)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated container: {exc}") from None
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return tensors, metadata


def save(path, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def tensor_digest(arr: np.ndarray) -> str:
    a = np.asarray(arr, dtype="<f8")
    h = hashlib.sha256()
    h.update(repr(a.shape).encode())
    h.update(a.tobytes(order="C"))
    return h.hexdigest()
