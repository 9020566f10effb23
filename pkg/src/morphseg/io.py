"""Binary tensor files (MTK1), PGM visualization, and small text formats.

MTK1 byte layout (little endian):

    4 bytes   magic ``MTK1``
    u32       rank
    rank*u32  extents
    f64*n     values, row-major (n = product of extents)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTK1"
_MAX_RANK = 8


class FormatError(ValueError):
    """Malformed binary file (bad magic, truncation, invalid extents)."""


def write_mtk1(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for e in arr.shape:
            f.write(struct.pack("<I", e))
        f.write(arr.astype("<f8").tobytes(order="C"))


def read_mtk1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for an MTK1 header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}")
    header = 8 + 4 * rank
    if len(raw) < header:
        raise FormatError(f"{path}: truncated extent list")
    extents = struct.unpack_from(f"<{rank}I", raw, 8) if rank else ()
    if any(e < 1 for e in extents):
        raise FormatError(f"{path}: zero-length extent in {extents}")
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    expected = header + 8 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - header} bytes, expected {8 * count}")
    values = np.frombuffer(raw, dtype="<f8", offset=header, count=count)
    arr = values.astype(np.float64).reshape(extents)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values in payload")
    return arr


def write_pgm(path, image) -> None:
    """8-bit grayscale PGM (P5) with linear min-max normalization."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM export needs a 2-D array, got shape {img.shape}")
    lo = float(img.min())
    hi = float(img.max())
    if hi - lo < 1e-12:
        scaled = np.zeros(img.shape, dtype=np.uint8)
    else:
        scaled = np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.tobytes(order="C"))
