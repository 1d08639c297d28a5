"""Flat binary container for per-utterance feature matrices.

Layout: little-endian header ``magic 'AFBX' | u8 version | u8 dtype code
(4 = float32, 8 = float64) | u16 zero pad | u32 n_frames | u32 n_dims``
followed by the row-major little-endian payload. Writes are byte-stable.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFBX"
VERSION = 1
_HEADER = struct.Struct("<4sBBHII")
_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {frames.shape}")
    if frames.dtype == np.float32:
        code = 4
    elif frames.dtype == np.float64:
        code = 8
    else:
        raise ValueError(f"unsupported feature dtype {frames.dtype}")
    payload = np.ascontiguousarray(frames, dtype=_CODES[code]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, code, 0, frames.shape[0], frames.shape[1])
    Path(path).write_bytes(header + payload)


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, version, code, _, n_frames, n_dims = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if code not in _CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dtype = _CODES[code]
    expect = _HEADER.size + n_frames * n_dims * dtype.itemsize
    if len(blob) != expect:
        raise ValueError(f"{path}: size mismatch ({len(blob)} bytes, expected {expect})")
    data = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size)
    return data.reshape(n_frames, n_dims).copy()
