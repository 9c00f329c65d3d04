"""ATF1 binary tensor files.

Layout: ``b"ATF1"``, u8 dtype code (0 = float64), u8 ndim, ndim little-endian
u32 dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"ATF1"
DTYPES = {0: np.dtype("<f8")}


class ATFError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise ATFError(f"too many dims: {arr.ndim}")
    head = MAGIC + struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def loads(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ATFError(f"{source}: not an ATF1 file")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPES:
        raise ATFError(f"{source}: unsupported dtype code {code}")
    dims_end = 6 + 4 * ndim
    if len(buf) < dims_end:
        raise ATFError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - dims_end != expected:
        raise ATFError(f"{source}: payload is {len(buf) - dims_end} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(shape).astype(np.float64)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as f:
        f.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return loads(f.read(), source=str(path))
