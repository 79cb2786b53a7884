"""Binary tensor file format.

Layout (little-endian)::

    b"CDTN" | u8 dtype flag (0 = f32, 1 = f64) | u32 rank | u32 extent * rank | payload
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Dict, Union

import numpy as np

from clusdiff.errors import DataError

MAGIC = b"CDTN"
_FLAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _FLAGS:
        raise DataError(f"unsupported tensor dtype {arr.dtype}")
    f.write(MAGIC)
    f.write(struct.pack("<BI", _FLAGS[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    flag, rank = struct.unpack("<BI", _read_exact(f, 5))
    if flag not in _DTYPES:
        raise DataError(f"unknown dtype flag {flag}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dt = _DTYPES[flag]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, n * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DataError("truncated tensor file")
    return b


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_named(path, tensors: Dict[str, np.ndarray]) -> None:
    """Several tensors, each preceded by a u32-length-prefixed UTF-8 name."""
    with open(path, "wb") as f:
        write_named(f, tensors)


def write_named(f: BinaryIO, tensors: Dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        write_tensor(f, arr)


def read_named(f: BinaryIO) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, n).decode()
        out[name] = read_tensor(f)
    return out


def load_named(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_named(f)
