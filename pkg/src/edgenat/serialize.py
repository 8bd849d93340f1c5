"""ENAT tensor container.

Layout (all integers 32-bit little-endian unsigned)::

    b"ENAT" | version | entry count
    per entry: name length | name (UTF-8) | rank | extents... | binary32 LE payload

An optional trailer ``b"META" | length | UTF-8 JSON`` follows the entries and
carries checkpoint metadata (step, config, config hash). Readers that only
know the entry layout can stop after the last entry.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"ENAT"
META_MAGIC = b"META"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts.append(META_MAGIC + struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def loads(buf: bytes) -> tuple:
    """Parse a container; returns ``(tensors, meta)`` with ``meta`` possibly None."""
    if buf[:4] != MAGIC:
        raise FormatError("missing ENAT magic")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("truncated container")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported ENAT version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(buf):
            raise FormatError("truncated entry name")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(buf):
            raise FormatError(f"truncated payload for {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += size
    meta = None
    if pos < len(buf):
        if buf[pos : pos + 4] != META_MAGIC:
            raise FormatError("unexpected trailing bytes")
        pos += 4
        (n,) = take("<I")
        if pos + n != len(buf):
            raise FormatError("metadata length does not match the trailer")
        meta = json.loads(buf[pos : pos + n].decode("utf-8"))
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    tmp.replace(path)
    return path


def load(path) -> tuple:
    return loads(Path(path).read_bytes())
