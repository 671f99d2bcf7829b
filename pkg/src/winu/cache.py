"""Binary "WINU" cache files.

Layout, all little-endian::

    b"WINU"                      magic
    u32   version                currently 1
    u32   meta_len               byte length of the metadata block
    bytes meta                   UTF-8 JSON object (kind, model spec, ...)
    u32   n_arrays
    repeated n_arrays times:
        u32   name_len, bytes name (UTF-8)
        u32   ndim
        u64   dims[ndim]
        f64   payload[prod(dims)] row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CacheFormatError

MAGIC = b"WINU"
VERSION = 1


def write_cache(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta or {})
    header["kind"] = kind
    meta_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def read_cache(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a cache file; returns ``(meta, arrays)``.

    Raises:
        CacheFormatError: bad magic, unknown version, truncation or kind mismatch.
    """
    buf = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise CacheFormatError(f"{path}: truncated cache file")
        out = buf[pos : pos + nbytes]
        pos += nbytes
        return out

    if take(4) != MAGIC:
        raise CacheFormatError(f"{path}: bad magic (not a WINU cache)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    meta = json.loads(take(meta_len).decode("utf-8"))
    if kind is not None and meta.get("kind") != kind:
        raise CacheFormatError(f"{path}: expected kind {kind!r}, found {meta.get('kind')!r}")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CacheFormatError(f"{path}: trailing bytes after payload")
    return meta, arrays
