"""Point-cloud file I/O.

Binary container: little-endian header ``{magic "SPCL", u32 M, u32 D, u32
C_raw}`` followed by M rows of float32, each row D position columns then
C_raw feature columns.  A whitespace-separated text reader (one point per
line) is provided for hand-written inputs.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SPCL"
_HEADER = struct.Struct("<4sIII")


def write_point_file(path, points: np.ndarray, spatial_dims: int = 3) -> None:
    points = np.ascontiguousarray(points, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] < spatial_dims:
        raise ValueError("points must be (M, D + C_raw) with D position columns")
    m, width = points.shape
    header = _HEADER.pack(MAGIC, m, spatial_dims, width - spatial_dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(points.tobytes(order="C"))


def read_point_file(path) -> tuple[np.ndarray, int]:
    """Returns ``(points, spatial_dims)`` from an SPCL file."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, m, d, c_raw = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an SPCL point file")
        body = fh.read()
    expected = m * (d + c_raw) * 4
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, got {len(body)}")
    points = np.frombuffer(body, dtype="<f4").reshape(m, d + c_raw)
    return points.astype(np.float32), d


def read_point_text(path, spatial_dims: int = 3) -> tuple[np.ndarray, int]:
    """Reads whitespace-separated points, one per line; '#' starts a comment."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if width is None:
                width = len(vals)
                if width < spatial_dims:
                    raise ValueError(f"{path}:{lineno}: fewer columns than spatial dims")
            elif len(vals) != width:
                raise ValueError(f"{path}:{lineno}: inconsistent column count")
            rows.append(vals)
    if not rows:
        raise ValueError("empty cloud")
    return np.asarray(rows, dtype=np.float32), spatial_dims


def load_points(path, spatial_dims: int = 3) -> tuple[np.ndarray, int]:
    """Dispatch on the SPCL magic; falls back to the text reader."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_point_file(path)
    return read_point_text(path, spatial_dims)
