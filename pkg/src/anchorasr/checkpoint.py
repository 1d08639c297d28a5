"""Versioned binary checkpoint container.

Layout: magic ``ANCK`` | u32 format version | u64 header length | header JSON
(sorted keys, compact) | parameter payload. The header maps each entry name to
dtype, shape, and payload offset; entries are laid out in sorted-name order,
little-endian, so identical state always serializes to identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ANCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays plus a JSON-serializable metadata block atomically."""
    entries = {}
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype == np.float32:
            code = "<f4"
        elif arr.dtype == np.float64:
            code = "<f8"
        else:
            raise ValueError(f"checkpoint entry {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "meta": meta, "entries": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = Path(path)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(out)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, arrays). Rejects unknown versions and bad magic."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    base = _PREFIX.size + hlen
    arrays = {}
    for name, e in header["entries"].items():
        dtype = _DTYPES[e["dtype"]]
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        arrays[name] = arr.reshape(shape).copy()
    return header["meta"], arrays
