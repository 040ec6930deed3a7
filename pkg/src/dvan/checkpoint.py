"""Flat binary container for named tensors.

Layout (all integers little-endian)::

    b"DVAN"  u32 version
    repeated until EOF:
        u32 name_length, name bytes (utf-8)
        u32 rank, rank x u64 extents
        product(extents) x f64 payload

Payloads are always written as float64; float32 arrays widen exactly, so a
save/load round trip is bit-exact once the caller casts back.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ParseError

MAGIC = b"DVAN"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ParseError("missing DVAN magic", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated record, wanted {n} bytes", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not utf-8", start) from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(8 * count)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
