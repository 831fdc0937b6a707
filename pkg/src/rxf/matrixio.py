"""Flat binary matrix blocks: the on-disk form of every feature stream.

Layout (little-endian throughout):

    bytes 0..3    magic "RXF1"
    byte  4       dtype code (1 = float32, 2 = float64)
    bytes 5..12   row count, u64
    bytes 13..20  column count, u64
    bytes 21..    row-major payload

The fixed-size header and row-major payload keep files memory-mappable.
Datasets always store float32; float64 blocks exist for checkpoints of
engines run at higher precision.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"RXF1"
HEADER = struct.Struct("<4sBQQ")
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_block(f: BinaryIO, arr: np.ndarray) -> None:
    """Write one matrix block to an open binary stream."""
    if arr.ndim != 2:
        raise ValueError(f"matrix block must be 2-d, got shape {arr.shape}")
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    f.write(HEADER.pack(MAGIC, code, arr.shape[0], arr.shape[1]))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_block(f: BinaryIO) -> np.ndarray:
    """Read one matrix block from an open binary stream."""
    raw = f.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise ValueError("truncated matrix block header")
    magic, code, rows, cols = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"bad matrix magic {magic!r}; expected {MAGIC!r}")
    dtype = CODE_DTYPES.get(code)
    if dtype is None:
        raise ValueError(f"unknown matrix dtype code {code}")
    payload = f.read(rows * cols * dtype.itemsize)
    if len(payload) != rows * cols * dtype.itemsize:
        raise ValueError("truncated matrix block payload")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder("="))


def write_matrix(path: str | Path, arr: np.ndarray) -> None:
    """Write a single-matrix file."""
    path = Path(path)
    if arr.dtype != np.float32:
        raise ValueError(f"stream matrices are stored as float32, got {arr.dtype}")
    with open(path, "wb") as f:
        write_block(f, arr)


def read_matrix(path: str | Path, mmap: bool = False) -> np.ndarray:
    """Read a single-matrix file; mmap=True returns a read-only view."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"matrix file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
        if len(raw) != HEADER.size:
            raise ValueError(f"truncated matrix header in {path}")
        magic, code, rows, cols = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"bad matrix magic in {path}: {magic!r}")
    dtype = CODE_DTYPES.get(code)
    if dtype is None:
        raise ValueError(f"unknown matrix dtype code {code} in {path}")
    expected = HEADER.size + rows * cols * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ValueError(f"matrix file {path} is {actual} bytes; header implies {expected}")
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r", offset=HEADER.size, shape=(rows, cols))
    with open(path, "rb") as f:
        f.seek(HEADER.size)
        data = np.fromfile(f, dtype=dtype, count=rows * cols)
    return data.reshape(rows, cols).astype(dtype.newbyteorder("="), copy=False)
