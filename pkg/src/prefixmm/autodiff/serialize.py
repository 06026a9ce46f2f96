"""Binary tensor records: ``b"PMM1"``, uint32 rank, uint32 dims, float32 LE values."""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"PMM1"


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").astype(np.float32)
    return data.reshape(dims)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    blob = f.read(n)
    if len(blob) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(blob)}")
    return blob
