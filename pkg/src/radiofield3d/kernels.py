"""Obstruction ray-marching kernels for the path-loss simulator.

Scene generation spends almost all of its time measuring, for every voxel,
how many meters of the transmitter-to-voxel segment pass through buildings.
Two interchangeable backends implement the same stepping rule:

* a numba ``@njit`` kernel (default when numba is importable), and
* a chunked pure-numpy fallback.

Set ``RADIOFIELD3D_NO_NUMBA=1`` to force the numpy path. Both backends march
the segment at a fixed resolution of at most 0.25 m, sample at step midpoints,
and attribute one step length to the blocked total whenever the building
height at the sampled cell exceeds the segment height there. Cells are looked
up by nearest voxel center (positions are in voxel units, centers at integer
coordinates).
"""

from __future__ import annotations

import math
import os

import numpy as np

STEP_METERS = 0.25

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorate(func):
            return func

        return decorate


def use_numba() -> bool:
    """True when the numba backend is active for this process call."""
    if os.environ.get("RADIOFIELD3D_NO_NUMBA", "").strip() not in ("", "0"):
        return False
    return NUMBA_AVAILABLE


def active_backend() -> str:
    return "numba" if use_numba() else "numpy"


@njit(cache=True, nogil=True)
def _obstructed_lengths_jit(src, targets, heights):  # pragma: no cover - jitted
    n_rows, n_cols = heights.shape
    out = np.zeros(targets.shape[0])
    for i in range(targets.shape[0]):
        dx = targets[i, 0] - src[0]
        dy = targets[i, 1] - src[1]
        dz = targets[i, 2] - src[2]
        length = math.sqrt(dx * dx + dy * dy + dz * dz)
        if length == 0.0:
            continue
        n_steps = max(1, int(math.ceil(length / STEP_METERS)))
        step = length / n_steps
        blocked = 0.0
        for j in range(n_steps):
            t = (j + 0.5) / n_steps
            px = src[0] + t * dx
            py = src[1] + t * dy
            pz = src[2] + t * dz
            ix = int(math.floor(px + 0.5))
            iy = int(math.floor(py + 0.5))
            if ix < 0:
                ix = 0
            elif ix >= n_cols:
                ix = n_cols - 1
            if iy < 0:
                iy = 0
            elif iy >= n_rows:
                iy = n_rows - 1
            if heights[iy, ix] > pz:
                blocked += step
        out[i] = blocked
    return out


def _obstructed_lengths_numpy(
    src: np.ndarray, targets: np.ndarray, heights: np.ndarray, chunk: int = 1024
) -> np.ndarray:
    n_rows, n_cols = heights.shape
    out = np.zeros(targets.shape[0])
    for start in range(0, targets.shape[0], chunk):
        tgt = targets[start : start + chunk]
        delta = tgt - src[None, :]
        length = np.sqrt(np.sum(delta * delta, axis=1))
        n_steps = np.maximum(1, np.ceil(length / STEP_METERS)).astype(np.int64)
        max_steps = int(n_steps.max())
        j = np.arange(max_steps)
        valid = j[None, :] < n_steps[:, None]
        t = (j[None, :] + 0.5) / n_steps[:, None]
        px = src[0] + t * delta[:, 0:1]
        py = src[1] + t * delta[:, 1:2]
        pz = src[2] + t * delta[:, 2:3]
        ix = np.clip(np.floor(px + 0.5).astype(np.int64), 0, n_cols - 1)
        iy = np.clip(np.floor(py + 0.5).astype(np.int64), 0, n_rows - 1)
        blocked = (heights[iy, ix] > pz) & valid
        step = np.where(length > 0, length / n_steps, 0.0)
        out[start : start + chunk] = blocked.sum(axis=1) * step
    return out


def obstructed_lengths(
    src: np.ndarray, targets: np.ndarray, heights: np.ndarray
) -> np.ndarray:
    """Blocked path length in meters from ``src`` to each target point.

    Args:
        src: ``(3,)`` source position (x, y, z) in voxel units.
        targets: ``(M, 3)`` target positions.
        heights: ``(H, W)`` building-height map in meters.

    Returns:
        ``(M,)`` array of obstructed lengths.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    heights = np.ascontiguousarray(heights, dtype=np.float64)
    if use_numba():
        return _obstructed_lengths_jit(src, targets, heights)
    return _obstructed_lengths_numpy(src, targets, heights)
