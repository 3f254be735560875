"""Versioned binary container of named tensors.

Layout (little-endian)::

    magic   b"MIEVCKPT"
    version u32
    meta    u32 length + UTF-8 JSON
    count   u32
    count x [name_len u16, name, dtype u8, ndim u8, shape u32 * ndim, raw bytes]
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"MIEVCKPT"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<u1")}
_CODE_OF = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def pack_tensors(tensors: "dict[str, np.ndarray]", meta: dict | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    return bytes(out)


def unpack_tensors(blob: bytes) -> "tuple[OrderedDict[str, np.ndarray], dict]":
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    try:
        (version,) = struct.unpack_from("<I", blob, pos)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos += 4
        (mlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        meta = json.loads(blob[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name}: truncated tensor payload")
            tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return tensors, meta


def save_checkpoint(path, tensors, meta=None) -> None:
    Path(path).write_bytes(pack_tensors(tensors, meta))


def load_checkpoint(path):
    return unpack_tensors(Path(path).read_bytes())
