"""Minimal binary PGM (P5) heatmap export for visual inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path: Path | str, values: np.ndarray) -> None:
    """Write unit-scale values as an 8-bit grayscale P5 image.

    Pixels are ``round(255 * v)``; inputs must lie in ``[0, 1]``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("PGM export expects a 2D array")
    if values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
        raise ValueError("PGM export expects values in [0, 1]")
    pixels = np.rint(255.0 * values).astype(np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a binary P5 image back into a uint8 array."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary P5 PGM file")
    width, height = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"{path}: expected 8-bit PGM, got maxval {maxval}")
    pixels = np.frombuffer(parts[3][: width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(height, width).copy()
