"""MSAT binary tensor files: named float32/float64 arrays, little-endian.

Layout: magic "MSAT", version u16, tensor count u32, then per tensor:
name (u16 length + UTF-8 bytes), dtype code u8 (f32=1, f64=2), rank u8,
dims as u32 each, raw little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSAT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorFileError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise TensorFileError("duplicate tensor names")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HI", VERSION, len(names))
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float32:
            arr = arr.astype("<f4", copy=False)
        elif arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        else:
            raise TensorFileError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise TensorFileError(f"tensor name too long: {name!r}")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic, not an MSAT file")
    off = 4
    version, count = struct.unpack_from("<HI", buf, off)
    off += 6
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in _CODE_DTYPES:
            raise TensorFileError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if off + nbytes > len(buf):
            raise TensorFileError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(dims)
        off += nbytes
        if name in out:
            raise TensorFileError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr.copy()
    if off != len(buf):
        raise TensorFileError(f"{path}: {len(buf) - off} trailing bytes")
    return out
