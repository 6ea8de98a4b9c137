"""Binary tensor files (".dt").

Layout, fixed little-endian regardless of host:

    magic   6 bytes   b"DTNSR1"
    dtype   1 byte    0 = real32 (IEEE float32), 1 = real64 (IEEE float64)
    rank    1 byte
    dims    rank x 8 bytes, unsigned little-endian
    payload prod(dims) x itemsize bytes, row-major little-endian

Zero-sized dimensions are legal (empty payload). Arrays are returned
C-contiguous so flat offset of index (i, j, ...) is the usual row-major one.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"DTNSR1"
FILE_EXTENSION = ".dt"

_DTYPE_TO_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_write(t: np.ndarray, sink: BinaryIO) -> int:
    """Write one tensor to ``sink``; returns the number of bytes written."""
    arr = np.ascontiguousarray(t)
    key = arr.dtype.newbyteorder("<")
    if key not in _DTYPE_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds 255")
    header = MAGIC + struct.pack("<BB", _DTYPE_TO_CODE[key], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(key, copy=False).tobytes(order="C")
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def tensor_read(source: BinaryIO) -> np.ndarray:
    """Read one tensor written by :func:`tensor_write`."""
    magic = source.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = source.read(2)
    if len(head) != 2:
        raise FormatError("truncated header")
    code, rank = struct.unpack("<BB", head)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    dims_raw = source.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise FormatError("truncated dimension list")
    shape = struct.unpack(f"<{rank}Q", dims_raw)
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = source.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"payload length mismatch: expected {count * dtype.itemsize} bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(shape)
    # native byte order, writable copy
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("="), copy=True))


def write_tensor_file(path, t: np.ndarray) -> int:
    with open(path, "wb") as fh:
        return tensor_write(t, fh)


def read_tensor_file(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return tensor_read(fh)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
