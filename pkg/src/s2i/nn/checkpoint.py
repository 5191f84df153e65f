"""Binary tensor container ("S2IC").

Layout, all integers little-endian u32::

    magic b"S2IC" | version | 32-byte schema hash | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 data (row-major)

Optimizer tensors are stored under the ``optim/`` name prefix.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"S2IC"
VERSION = 1
OPTIM_PREFIX = "optim/"
_U32 = struct.Struct("<I")


class SchemaMismatchError(ValueError):
    pass


def schema_hash(schema) -> bytes:
    """SHA-256 of the canonical JSON encoding of ``schema``."""
    blob = json.dumps(schema, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).digest()


def write_tensors(path, tensors: dict[str, np.ndarray], digest: bytes) -> None:
    if len(digest) != 32:
        raise ValueError("schema hash must be 32 bytes")
    parts = [MAGIC, _U32.pack(VERSION), digest, _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_tensors(path, expected_hash: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an S2IC checkpoint")
    (version,) = _U32.unpack_from(raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[8:40]
    if expected_hash is not None and digest != expected_hash:
        raise SchemaMismatchError(
            f"{path}: model schema hash {digest.hex()[:12]} does not match expected {expected_hash.hex()[:12]}"
        )
    (count,) = _U32.unpack_from(raw, 40)
    pos, tensors = 44, {}
    for _ in range(count):
        (n,) = _U32.unpack_from(raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = _U32.unpack_from(raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return digest, tensors
