"""CG3D tensor container.

Layout (little-endian)::

    b"CG3D" | version:u32 | record*

    record := name_len:u16 | name:utf-8 | dtype:u8 | ndim:u8 | dims:u32[ndim] | payload

``dtype`` is 0 for float32 and 1 for int32; payloads are row-major.  Records
run until end of file.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CG3D"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


class ContainerError(ValueError):
    pass


def _coerce(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype("<f4", copy=False)
    if arr.dtype.kind in "iub":
        if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
            raise ContainerError(f"tensor {name!r} does not fit int32")
        return arr.astype("<i4", copy=False)
    raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in tensors.items():
        arr = _coerce(name, arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]!r}...")
        if arr.ndim > 255:
            raise ContainerError(f"tensor {name!r} has too many dimensions")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ContainerError("not a CG3D container (bad magic)")
    if len(data) < 8:
        raise ContainerError("truncated CG3D header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported CG3D version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            if code not in _DTYPES:
                raise ContainerError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise ContainerError(f"tensor {name!r}: truncated payload")
            arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            pos += nbytes
            if name in out:
                raise ContainerError(f"duplicate tensor name {name!r}")
            out[name] = arr.reshape(dims).copy()
    except struct.error as exc:
        raise ContainerError(f"truncated CG3D record: {exc}") from exc
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def encode_text(text: str) -> np.ndarray:
    """Pack UTF-8 text into an int32 byte tensor (the container has no byte dtype)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<i4")


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")
