"""Tensor container (``.utr``) reader and writer.

Layout, all integers little-endian::

    b"UTR1"
    u64   entry count
    per entry:
        u32   name length in bytes, then UTF-8 name
        u8    dtype code (0 = float32, 1 = int64, 2 = uint8)
        u8    ndim
        u64   dims[ndim]
        payload, row-major, little-endian

Entries keep insertion order so equal inputs give equal bytes.
"""
import io
import struct

import numpy as np

MAGIC = b"UTR1"

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}


class ContainerError(ValueError):
    pass


def _code_for(arr):
    try:
        return CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}; use float32, int64 or uint8") from None


def dumps(tensors):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value)
        code = _code_for(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(data):
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("bad magic")
    (count,) = struct.unpack_from("<Q", view, 4)
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            dtype = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(view):
                raise ContainerError(f"truncated payload for {name!r}")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims)
            out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    if pos != len(view):
        raise ContainerError("trailing bytes after last entry")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
