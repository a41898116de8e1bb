"""Checkpoint archive: named float32 tensors in a little-endian binary container.

Layout: magic "ACPT", version u32, then per-tensor records until EOF.
Record: name length u32 + UTF-8 name, rank u32, extents as u64 each,
raw float32 payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .binio import CorruptFileError, atomic_write, pack_str, read_exact, unpack_str

MAGIC = b"ACPT"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        for ext in arr.shape:
            buf.write(struct.pack("<Q", ext))
        buf.write(arr.tobytes())
    atomic_write(path, buf.getvalue())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CorruptFileError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CorruptFileError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if head == b"":
                break
            if len(head) != 4:
                raise CorruptFileError("truncated tensor record header")
            (nlen,) = struct.unpack("<I", head)
            name = read_exact(fh, nlen, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", read_exact(fh, 4, "tensor rank"))
            shape = tuple(struct.unpack("<Q", read_exact(fh, 8, "extent"))[0]
                          for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            payload = read_exact(fh, count * 4, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors
