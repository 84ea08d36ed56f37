"""Flat binary container for named float32 arrays.

Layout: magic ``FSRA``, version u32, then per entry: name length (u32),
name bytes (utf-8), rank (u32), extents (u32 each), raw float32 data.
All integers and floats are little-endian. Entries are written in
sorted name order so identical contents produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSRA"
VERSION = 1

_U32 = struct.Struct("<I")


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(arr.ndim))
            for ext in arr.shape:
                fh.write(_U32.pack(ext))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter container (bad magic)")
    (version,) = _U32.unpack_from(blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    while pos < len(blob):
        (name_len,) = _U32.unpack_from(blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = _U32.unpack_from(blob, pos)
        pos += 4
        shape = []
        for _ in range(rank):
            (ext,) = _U32.unpack_from(blob, pos)
            shape.append(ext)
            pos += 4
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = arr.copy()
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after last entry")
    return out


def bytes_to_f32(raw: bytes) -> np.ndarray:
    """Encode arbitrary bytes as an exactly representable float32 array."""
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def f32_to_bytes(arr: np.ndarray) -> bytes:
    values = np.asarray(arr)
    rounded = np.rint(values)
    if not np.all((rounded >= 0) & (rounded <= 255) & (rounded == values)):
        raise ValueError("array does not hold byte values")
    return rounded.astype(np.uint8).tobytes()
