"""Reader/writer for the ``LFT1`` named-tensor container.

Layout (little-endian)::

    b"LFT1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dim * rank, f32 payload
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"LFT1"


class FormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"rank {arr.ndim} too large for {name}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("missing LFT1 magic")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise FormatError("truncated LFT1 stream")
        values = struct.unpack_from(fmt, view, pos)
        pos += size
        return values

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(view):
            raise FormatError("truncated tensor name")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(view):
            raise FormatError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after LFT1 payload")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
