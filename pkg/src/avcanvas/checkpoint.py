"""AVCT checkpoint container.

Layout::

    b"AVCT" | u32 version (=1) | u64 header length | UTF-8 JSON header | pad
    | tensor data (little-endian f32, each tensor at a 64-byte aligned offset)

Offsets in the header are relative to the start of the data section, which
itself begins at the first 64-byte boundary after the header.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"AVCT"
VERSION = 1
ALIGN = 64


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def encode_checkpoint(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        offset = _align(offset)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append((offset, data))
        offset += len(data)
    meta = dict(metadata)
    meta["tensor_count"] = len(entries)
    header = json.dumps({"tensors": entries, "metadata": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(header)) + header
    data_start = _align(len(prefix))
    buf = bytearray(data_start + offset)
    buf[: len(prefix)] = prefix
    for off, data in blobs:
        buf[data_start + off : data_start + off + len(data)] = data
    return bytes(buf)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(raw) < 16:
        raise CheckpointError(f"{source}: truncated file ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}, expected {VERSION}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    entries = header.get("tensors", [])
    meta = header.get("metadata", {})
    if meta.get("tensor_count", len(entries)) != len(entries):
        raise CheckpointError(
            f"{source}: tensor-count mismatch (header lists {len(entries)}, metadata says {meta['tensor_count']})"
        )
    data_start = _align(16 + hlen)
    tensors: dict[str, np.ndarray] = {}
    for e in entries:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        start = data_start + int(e["offset"])
        if start % ALIGN:
            raise CheckpointError(f"{source}: tensor {e['name']} not 64-byte aligned")
        if start + nbytes > len(raw):
            raise CheckpointError(f"{source}: truncated data for tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
    return tensors, meta


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors, metadata))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
