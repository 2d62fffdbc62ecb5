"""NDCK named-tensor checkpoint container.

Layout (little-endian): magic ``NDCK``, version u16, count u32, then per
entry: name length u16, UTF-8 name, rank u8, dims u32 each, dtype tag u8,
raw values.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"NDCK"
VERSION = 1

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected NDCK", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported NDCK version {version}", 4)
    (count,) = r.unpack("<I", "entry count")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8", start) from exc
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        tag_pos = r.pos
        (tag,) = r.unpack("<B", "dtype tag")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag}", tag_pos)
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(n * dt.itemsize, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last entry", r.pos)
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict:
    return decode(Path(path).read_bytes())
