"""Shared little-endian binary helpers and atomic file writes."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path


class CorruptFileError(ValueError):
    pass


def atomic_write(path: str | Path, payload: bytes) -> None:
    """Write via temp file + rename so interrupted runs never leave partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"truncated file while reading {what}: "
                               f"wanted {n} bytes, got {len(buf)}")
    return buf


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def unpack_str(fh, what: str) -> str:
    (n,) = struct.unpack("<I", read_exact(fh, 4, f"{what} length"))
    return read_exact(fh, n, what).decode("utf-8")
