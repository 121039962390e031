"""Binary tensor blobs (``.dkt1``).

Layout: magic ``b"DKT1"``, one byte dtype code (0 = float32, 1 = float64), one
byte rank, ``rank`` little-endian uint32 dims, then the row-major little-endian
payload.
"""

import struct

import numpy as np

from dkdm.errors import FormatError

MAGIC = b"DKT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(array):
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {array.dtype}")
    if array.ndim > 255:
        raise FormatError("rank too large")
    head = MAGIC + struct.pack("<BB", _CODES[array.dtype], array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[_CODES[array.dtype]]).tobytes()
    return head + payload


def decode(raw, source="<bytes>"):
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic bytes, not a DKT1 tensor blob")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    off = 6 + 4 * rank
    if len(raw) < off:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)
    dt = _DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) - off != need:
        raise FormatError(f"{source}: payload has {len(raw) - off} bytes, expected {need}")
    arr = np.frombuffer(raw, dtype=dt, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode(raw, source=str(path))
