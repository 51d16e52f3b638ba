"""Compact binary stroke-set persistence.

Layout (little-endian): magic "3DDL", version u16, n_ind u16, n_dep u16,
precision flag u8 (0 = float16, 1 = float32), then 12 numbers per curve
followed by 12 per quadric. The default half-precision keeps the standard
32-curve/4-quadric scene under 1.5 kB.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scene import StrokeSet, pack_params, unpack_params

MAGIC = b"3DDL"
VERSION = 1
PRECISION_HALF = 0
PRECISION_FULL = 1
_HEADER = struct.Struct("<4sHHHB")


def save_strokes(strokes: StrokeSet, path: str | Path, half_precision: bool = True) -> None:
    params = pack_params(strokes)
    flag = PRECISION_HALF if half_precision else PRECISION_FULL
    dtype = np.float16 if half_precision else np.float32
    payload = params.astype("<" + np.dtype(dtype).str[1:]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, strokes.n_ind, strokes.n_dep, flag)
    Path(path).write_bytes(header + payload)


def load_strokes(path: str | Path) -> StrokeSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("stroke file too short")
    magic, version, n_ind, n_dep, flag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    if flag not in (PRECISION_HALF, PRECISION_FULL):
        raise ValueError(f"unknown precision flag {flag}")
    dtype = np.float16 if flag == PRECISION_HALF else np.float32
    count = 12 * (n_ind + n_dep)
    expected = count * np.dtype(dtype).itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise ValueError(f"payload length {len(payload)} != expected {expected}")
    params = np.frombuffer(payload, dtype="<" + np.dtype(dtype).str[1:]).astype(np.float64)
    return unpack_params(params, n_ind, n_dep)
