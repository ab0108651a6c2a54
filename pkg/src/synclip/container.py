"""Versioned named-array container shared by corpora, clips and checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"SYNCLIPA"
    8       4     format version, uint32 (currently 1)
    12      8     header length in bytes, uint64
    20      n     header, UTF-8 JSON object:
                    {"meta": {...},
                     "arrays": [{"name": str, "dtype": str, "shape": [int, ...],
                                 "offset": int, "nbytes": int}, ...]}
    20+n    m     payload: each array's bytes in row-major (C) order, little-endian,
                  at ``offset`` relative to the payload start, in header order
    20+n+m  32    SHA-256 digest of every preceding byte

``dtype`` is a numpy type string with explicit byte order (``"<f4"``, ``"|u1"``).
A file whose digest, lengths or version do not check out is rejected as a whole.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"SYNCLIPA"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32
_ALLOWED_KINDS = "biuf"


def _le_dtype(dtype: np.dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.kind not in _ALLOWED_KINDS:
        raise FormatError(f"unsupported dtype {dtype!r}")
    return dtype.newbyteorder("<") if dtype.byteorder == ">" else dtype


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    """Serialize ``name -> array`` plus a JSON-compatible ``meta`` dict to bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(value)
        dtype = _le_dtype(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C")
        entries.append({"name": str(name), "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[dict, dict]:
    """Parse bytes produced by :func:`dumps`; returns ``(arrays, meta)``."""
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise FormatError("container too short")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic; not a synclip container")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    payload = body[start + header_len:]
    arrays = {}
    for entry in header.get("arrays", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        lo, n = int(entry["offset"]), int(entry["nbytes"])
        if lo + n > len(payload) or n != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"array {entry['name']!r} overruns payload")
        arr = np.frombuffer(payload, dtype=dtype, count=n // dtype.itemsize if dtype.itemsize else 0,
                            offset=lo).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return arrays, header.get("meta", {})


def save(path, arrays: dict, meta: dict | None = None) -> None:
    """Write a container atomically (temp file + rename)."""
    path = Path(path)
    data = dumps(arrays, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
