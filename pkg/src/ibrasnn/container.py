"""IBRT binary tensor container.

Layout (all integers little-endian)::

    b"IBRT" | u8 version | u8 dtype code | u32 rank | rank x u64 dims | payload

dtype codes: 0 real32, 1 int32, 2 bit (packed LSB-first, 8 per byte),
3 real64.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError
from .tensor import Tensor, dtype_name

MAGIC = b"IBRT"
VERSION = 1
CODES = {"real32": 0, "int32": 1, "bit": 2, "real64": 3}
_NAMES = {v: k for k, v in CODES.items()}
_NP = {"real32": "<f4", "int32": "<i4", "real64": "<f8"}


def encode(t: Tensor | np.ndarray, dtype: str | None = None) -> bytes:
    if isinstance(t, Tensor):
        arr, dtype = t.data, dtype or t.dtype
    else:
        arr = np.asarray(t)
        if dtype is None:
            if arr.dtype == np.bool_:
                dtype = "bit"
            elif np.issubdtype(arr.dtype, np.integer) and arr.dtype != np.uint8:
                dtype = "int32"
            else:
                dtype = dtype_name(arr.dtype)
    if dtype not in CODES:
        raise FormatError(f"dtype {dtype!r} has no IBRT code")
    header = MAGIC + struct.pack("<BBI", VERSION, CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if dtype == "bit":
        flat = np.asarray(arr, dtype=np.uint8).reshape(-1)
        if flat.size and flat.max() > 1:
            raise FormatError("bit payload holds values other than 0/1")
        payload = np.packbits(flat, bitorder="little").tobytes()
    else:
        payload = np.ascontiguousarray(arr, dtype=_NP[dtype]).tobytes()
    return header + payload


def decode(buf: bytes) -> Tensor:
    f = io.BytesIO(buf)
    if f.read(4) != MAGIC:
        raise FormatError("not an IBRT container (bad magic bytes)")
    head = f.read(6)
    if len(head) < 6:
        raise IntegrityError("truncated IBRT header")
    version, code, rank = struct.unpack("<BBI", head)
    if version != VERSION:
        raise FormatError(f"unsupported IBRT version {version}")
    if code not in _NAMES:
        raise FormatError(f"unknown IBRT dtype code {code}")
    dims_raw = f.read(8 * rank)
    if len(dims_raw) < 8 * rank:
        raise IntegrityError("truncated IBRT dims")
    shape = struct.unpack(f"<{rank}Q", dims_raw)
    dtype = _NAMES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    rest = f.read()
    if dtype == "bit":
        need = (count + 7) // 8
        if len(rest) != need:
            raise IntegrityError(f"bit payload has {len(rest)} bytes, expected {need}")
        bits = np.unpackbits(np.frombuffer(rest, dtype=np.uint8), bitorder="little", count=count)
        arr = bits.reshape(shape)
    else:
        itemsize = np.dtype(_NP[dtype]).itemsize
        if len(rest) != count * itemsize:
            raise IntegrityError(f"payload has {len(rest)} bytes, expected {count * itemsize}")
        arr = np.frombuffer(rest, dtype=_NP[dtype]).reshape(shape)
    return Tensor(arr, dtype=dtype)


def save(path, t: Tensor | np.ndarray, dtype: str | None = None) -> None:
    Path(path).write_bytes(encode(t, dtype))


def load(path) -> Tensor:
    return decode(Path(path).read_bytes())
