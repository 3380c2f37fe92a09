"""TGRD tensor container and key=value manifests.

Layout (all integers little-endian)::

    magic   b"TGRD"
    version u16            (currently 1)
    count   u32
    entries, each:
        name_len u16, name (ASCII)
        ndim     u8,  dims u32 * ndim
        dtype    u8   (0 = float32, 1 = float64)
        values   row-major, little-endian
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"TGRD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{name!r}: dtype {arr.dtype} is not float32/float64")
        try:
            raw_name = name.encode("ascii")
        except UnicodeEncodeError:
            raise FormatError(f"tensor name {name!r} is not ASCII") from None
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"{name!r}: name or rank too large for the container")
        tag = _TAGS[arr.dtype]
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptionError(f"truncated container: needed {n} bytes", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"non-ASCII tensor name at byte {pos - name_len}") from None
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        tag_at = pos
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} at byte {tag_at}")
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = data.astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CorruptionError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return out


def write_grid_file(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(tensors)
    with open(path, "wb") as fh:
        fh.write(data)


def read_grid_file(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_manifest(path: str | os.PathLike, entries: Mapping[str, object]) -> None:
    """Write ``key=value`` lines (UTF-8, LF) in insertion order."""
    lines = []
    for key, value in entries.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text or not key:
            raise FormatError(f"manifest entry {key!r} cannot be represented")
        lines.append(f"{key}={text}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
