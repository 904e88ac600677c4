"""SGNT v1 tensor files.

Layout: ``b"SGNT"``, u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 rank,
little-endian u32 extents, then the little-endian row-major payload.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"SGNT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"SGNT stores f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large for SGNT")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFormatError("bad SGNT magic")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported SGNT version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown SGNT dtype code {code}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated SGNT header")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + count * dtype.itemsize:
        raise TensorFormatError(f"SGNT payload size mismatch for shape {dims}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save(path: Union[str, os.PathLike], arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path: Union[str, os.PathLike]) -> np.ndarray:
    return decode(Path(path).read_bytes())
