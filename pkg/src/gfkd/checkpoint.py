"""Versioned little-endian binary container for named float64 arrays.

Layout::

    b"GFKD" | u16 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u32 rank | u64 extents[rank] | f64 values

Non-numeric metadata (config hashes, RNG states) is stored as byte arrays,
one byte per float64 value.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

MAGIC = b"GFKD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}, file has {len(blob)}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    magic = take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version: expected {VERSION}, found {version}")
    (count,) = struct.unpack("<I", take(4))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last entry")
    return out


def save_checkpoint(path: str, entries: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename)."""
    blob = encode(entries)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode(fh.read())


def bytes_entry(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.float64)


def entry_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr).astype(np.uint8).tobytes()


def json_entry(obj) -> np.ndarray:
    return bytes_entry(json.dumps(obj, sort_keys=True).encode("utf-8"))


def entry_json(arr: np.ndarray):
    return json.loads(entry_bytes(arr).decode("utf-8"))
