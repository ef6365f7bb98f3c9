"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    b"SABR"  u32 version  u32 config_len  config (UTF-8 JSON)
    u32 tensor_count
    per tensor: u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 dims[rank]  payload

dtype tags: 0 = float64, 1 = float32 (lossy down-conversion on save).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from sabr.numerics import ParamStore

MAGIC = b"SABR"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {"float64": 0, "float32": 1}


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: ParamStore
    storage: str = "float64"
    meta: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    if ckpt.storage not in _TAGS:
        raise CheckpointError(f"unknown storage dtype {ckpt.storage!r}")
    tag = _TAGS[ckpt.storage]
    blob = json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise NotACheckpointError("not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (expected {VERSION})")
    (blob_len,) = r.unpack("<I")
    header = json.loads(r.take(blob_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    params = ParamStore()
    storage = "float64"
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dims = r.unpack(f"<{rank}Q")
        dtype = _DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(dims)
        params[name] = arr
        storage = "float32" if tag == 1 else "float64"
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(header["config"], params, storage, header.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return loads(f.read())
