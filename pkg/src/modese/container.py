"""Versioned binary container for models and other array artifacts.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MODESE\\x00\\x1a"
    8       2     format version (uint16), currently 1
    10      4     header length H in bytes (uint32)
    14      H     UTF-8 JSON header:
                    {"kind": str, "meta": {...},
                     "arrays": [{"name": str, "dtype": "<f8" | "<i8", "shape": [...]}, ...]}
    14+H    ...   array payloads, in header order, C-contiguous, raw bytes
    end-4   4     CRC-32 of every preceding byte (uint32)

Floating arrays are stored as little-endian float64 and integer arrays as
little-endian int64, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from modese.errors import FormatError

MAGIC = b"MODESE\x00\x1a"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


def _encode(arr: np.ndarray) -> tuple[str, np.ndarray]:
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        return "<f8", np.asarray(arr, dtype="<f8", order="C")
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "<i8", np.asarray(arr, dtype="<i8", order="C")
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    entries, blobs = [], []
    for name, arr in arrays.items():
        dtype, data = _encode(arr)
        entries.append({"name": name, "dtype": dtype, "shape": list(data.shape)})
        blobs.append(data.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    body += struct.pack("<I", zlib.crc32(body))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; raise :class:`FormatError` on any defect."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < _PREFIX.size + 4:
        raise FormatError(f"{path}: file too short to be a model container ({len(raw)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r}; not a modese container")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version} (this build reads {VERSION})")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch; file is truncated or corrupt")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} artifact, found {header.get('kind')!r}")
    arrays = {}
    offset = _PREFIX.size + header_len
    end = len(raw) - 4
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > end:
            raise FormatError(f"{path}: payload for {entry['name']!r} runs past end of file")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        native = np.float64 if dtype.kind == "f" else np.int64
        arrays[entry["name"]] = arr.astype(native)
        offset += nbytes
    if offset != end:
        raise FormatError(f"{path}: {end - offset} unexpected trailing bytes")
    return header["meta"], arrays
