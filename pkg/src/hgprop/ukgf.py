"""Reader/writer for the ``UKGF`` dense float32 matrix format.

Layout (little-endian): magic ``b"UKGF"``, u32 version (=1), u64 rows,
u32 dim, then ``rows * dim`` float32 values in row-major order.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UKGF"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")
HEADER_SIZE = _HEADER.size  # 20 bytes


class UkgfError(ValueError):
    pass


def _read_header(fh) -> tuple[int, int]:
    raw = fh.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise UkgfError("truncated header")
    magic, version, rows, dim = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise UkgfError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UkgfError(f"unsupported version {version}")
    return rows, dim


def read_header(path: str | os.PathLike) -> tuple[int, int]:
    with open(path, "rb") as fh:
        return _read_header(fh)


def write_matrix(path: str | os.PathLike, data: np.ndarray) -> None:
    """Write ``data`` atomically (temp file, then rename)."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise UkgfError("expected a 2-d matrix")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, dim = _read_header(fh)
        buf = fh.read()
    if len(buf) != rows * dim * 4:
        raise UkgfError(f"{path}: expected {rows * dim} floats, got {len(buf) // 4}")
    return np.frombuffer(buf, dtype="<f4").reshape(rows, dim).astype(np.float32)


def open_memmap(path: str | os.PathLike, mode: str = "r") -> np.memmap:
    rows, dim = read_header(path)
    expected = HEADER_SIZE + rows * dim * 4
    if os.path.getsize(path) != expected:
        raise UkgfError(f"{path}: size mismatch")
    return np.memmap(path, dtype="<f4", mode=mode, offset=HEADER_SIZE, shape=(rows, dim))


def create_memmap(path: str | os.PathLike, rows: int, dim: int) -> np.memmap:
    """Preallocate a UKGF file and return a writable view of its payload."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, dim))
        fh.truncate(HEADER_SIZE + rows * dim * 4)
    return np.memmap(path, dtype="<f4", mode="r+", offset=HEADER_SIZE, shape=(rows, dim))


def file_sha256(path: str | os.PathLike, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()
