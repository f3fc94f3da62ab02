"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "TXDCKPT1" | u32 version | u32 block count | blocks...

Each block is: u32 name length | name utf-8 | u8 kind | payload.
Array blocks (kind 0/1/2 = f32/f64/i64): u8 ndim, u32 dims..., raw bytes.
JSON blocks (kind 3): u64 byte length, utf-8 payload.

Blocks are written in insertion order and reads preserve it, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "write_blocks", "read_blocks"]

_MAGIC = b"TXDCKPT1"
_VERSION = 1
_ARRAY_KINDS: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
}
_KIND_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_JSON_KIND = 3


class CheckpointError(RuntimeError):
    """Corrupt container or incompatible contents."""


def write_blocks(path: str | Path, blocks: "OrderedDict[str, np.ndarray | dict]") -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(blocks)))
    for name, value in blocks.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        if isinstance(value, dict):
            payload = json.dumps(value, sort_keys=True).encode("utf-8")
            buf.write(struct.pack("<B", _JSON_KIND))
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
            continue
        arr = np.asarray(value)
        if arr.dtype not in _KIND_OF_DTYPE:
            raise CheckpointError(f"block {name!r}: unsupported dtype {arr.dtype}")
        kind = _KIND_OF_DTYPE[arr.dtype]
        buf.write(struct.pack("<B", kind))
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype(_ARRAY_KINDS[kind], copy=False).tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def read_blocks(path: str | Path) -> "OrderedDict[str, np.ndarray | dict]":
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    version, count = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    offset = 16
    blocks: OrderedDict[str, np.ndarray | dict] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (kind,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        if kind == _JSON_KIND:
            (size,) = struct.unpack_from("<Q", raw, offset)
            offset += 8
            blocks[name] = json.loads(raw[offset:offset + size].decode("utf-8"))
            offset += size
            continue
        if kind not in _ARRAY_KINDS:
            raise CheckpointError(f"{path}: block {name!r} has unknown kind {kind}")
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
        offset += 4 * ndim
        dtype = _ARRAY_KINDS[kind]
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = size * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=size, offset=offset).reshape(shape)
        blocks[name] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last block")
    return blocks
