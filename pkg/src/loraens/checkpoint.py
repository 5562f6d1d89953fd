"""LENS tensor checkpoint files.

Layout (all integers little-endian)::

    b"LENS" | u32 version
    repeated: u32 name_len | name (utf-8) | u8 dtype | u32 ndim | u32 dims[ndim] | payload

dtype 0 is float32 and 1 is float64.  Records are read until end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LENS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a LENS checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported LENS version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BI", raw, off)
            off += 5
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _DTYPES[tag]
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(dims)
            off += count * dt.itemsize
            out[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt LENS record near byte {off}") from exc
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
