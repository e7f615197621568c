"""Portable tensor file.

Layout (all integers little-endian)::

    b"LSEG" | version:u32 | header_len:u32 | header (UTF-8 JSON) | payload

The header is ``{"dtype": "f32le", "shape": [...], "meta": {...}}`` and the
payload is the row-major float32 data, ``4 * prod(shape)`` bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from llmseg._io import atomic_write_bytes

MAGIC = b"LSEG"
VERSION = 1
MAX_HEADER = 64 * 1024
MAX_NDIM = 4
_PREFIX = struct.Struct("<4sII")


class TensorFileError(ValueError):
    pass


def encode_tensor(values, meta=None) -> bytes:
    arr = np.asarray(values)
    if arr.dtype.kind not in "fiu":
        raise TensorFileError(f"unsupported array dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise TensorFileError(f"tensor rank must be 1..{MAX_NDIM}, got {arr.ndim}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.isfinite(arr).all():
        raise TensorFileError("tensor contains non-finite values")
    header = json.dumps(
        {"dtype": "f32le", "shape": list(arr.shape), "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    if len(header) > MAX_HEADER:
        raise TensorFileError(f"header is {len(header)} bytes, limit {MAX_HEADER}")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + arr.tobytes(order="C")


def decode_tensor(data: bytes):
    if len(data) < _PREFIX.size:
        raise TensorFileError("file too short for tensor prefix")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if header_len > MAX_HEADER:
        raise TensorFileError(f"header length {header_len} exceeds limit")
    start = _PREFIX.size + header_len
    if len(data) < start:
        raise TensorFileError("truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"unreadable header: {exc}") from exc
    if header.get("dtype") != "f32le":
        raise TensorFileError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header.get("shape", ()))
    if not 1 <= len(shape) <= MAX_NDIM or any(s < 0 for s in shape):
        raise TensorFileError(f"invalid shape {shape}")
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    payload = data[start:]
    if len(payload) != expected:
        raise TensorFileError(f"payload length mismatch: expected {expected} bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.isfinite(values).all():
        raise TensorFileError("payload contains non-finite values")
    return values, header.get("meta", {})


def write_tensor(path, values, meta=None) -> None:
    atomic_write_bytes(path, encode_tensor(values, meta))


def read_tensor(path):
    """Return ``(values, meta)``; ``values`` is a float32 array."""
    return decode_tensor(Path(path).read_bytes())
