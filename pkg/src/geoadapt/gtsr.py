"""GTSR tensor file format.

Layout: magic ``GTSR``, u8 version (=1), u8 dtype code (0=float32,
1=float64), u8 rank, ``rank`` little-endian u32 dims, then the raw
little-endian row-major payload. Every dataset and checkpoint array in
this project is stored this way.
"""

import struct

import numpy as np

MAGIC = b"GTSR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class GtsrError(ValueError):
    """Raised on malformed GTSR bytes or unsupported arrays."""


def dumps(array) -> bytes:
    arr = np.asarray(array)  # tobytes(order="C") below handles layout; keep 0-d rank
    if arr.dtype not in _CODE_FOR_KIND:
        raise GtsrError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise GtsrError("rank exceeds u8")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODE_FOR_KIND[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + dims + payload


def loads(blob: bytes) -> np.ndarray:
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise GtsrError("not a GTSR blob")
    version, code, rank = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise GtsrError(f"unsupported GTSR version {version}")
    if code not in _DTYPE_CODES:
        raise GtsrError(f"unknown dtype code {code}")
    dim_end = 7 + 4 * rank
    if len(blob) < dim_end:
        raise GtsrError("truncated dimension block")
    shape = struct.unpack(f"<{rank}I", blob[7:dim_end])
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = dim_end + count * dtype.itemsize
    if len(blob) != expected:
        raise GtsrError(f"payload size mismatch: got {len(blob)}, want {expected}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=dim_end)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
