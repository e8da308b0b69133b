"""PCLT tensor checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"PCLT"
    version u32      1
    count   u32      number of tensors
    per tensor:
        name_len u16, name bytes (UTF-8)
        rank     u8
        dims     rank x u64
        payload  row-major float32, little-endian

Round-trips are bit-exact: payloads are written straight from the float32
buffers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"PCLT"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays in insertion order."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a PCLT file back into an ordered name -> float32 array map."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise LoadError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", data, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}Q", data, offset)
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        out[name] = arr.astype(np.float32)
    if offset != len(data):
        raise LoadError(f"{path}: {len(data) - offset} trailing bytes")
    return out
