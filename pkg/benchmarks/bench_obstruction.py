"""Benchmark the obstruction ray-march: numba kernel vs numpy fallback.

Usage: python benchmarks/bench_obstruction.py [--width 64] [--layers 8] [--repeats 5]

The numpy path is what you get with RADIOFIELD3D_NO_NUMBA=1; this script
times both backends on the same desk-scale scene and checks they agree.
"""

import argparse
import os
import time

import numpy as np

from radiofield3d import kernels
from radiofield3d.scene import SceneConfig, _draw_tx, _place_buildings


def build_problem(width: int, layers: int, seed: int):
    config = SceneConfig(width=width, height=width, n_layers=layers, seed=seed)
    rng = np.random.default_rng(seed)
    heights = _place_buildings(config, rng)
    tx = _draw_tx(config, rng)
    altitudes = config.altitudes
    zz, yy, xx = np.meshgrid(
        altitudes, np.arange(width), np.arange(width), indexing="ij"
    )
    targets = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(float)
    return tx, targets, heights


def time_backend(fn, repeats: int) -> float:
    fn()  # warm up (JIT compile for the numba path)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--layers", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    tx, targets, heights = build_problem(args.width, args.layers, args.seed)
    voxels = targets.shape[0]
    print(f"scene: {args.width}x{args.width}x{args.layers} = {voxels} voxels")

    timings = {}
    outputs = {}
    for backend in ("numba", "numpy"):
        if backend == "numba" and not kernels.NUMBA_AVAILABLE:
            print("numba unavailable; skipping")
            continue
        os.environ["RADIOFIELD3D_NO_NUMBA"] = "0" if backend == "numba" else "1"
        outputs[backend] = kernels.obstructed_lengths(tx, targets, heights)
        timings[backend] = time_backend(
            lambda: kernels.obstructed_lengths(tx, targets, heights), args.repeats
        )
        per_voxel = timings[backend] / voxels * 1e6
        print(f"{backend:>6}: {timings[backend] * 1e3:8.2f} ms  ({per_voxel:.3f} us/voxel)")

    if len(outputs) == 2:
        max_diff = np.abs(outputs["numba"] - outputs["numpy"]).max()
        print(f"max backend difference: {max_diff:.3e} m")
        if "numba" in timings:
            print(f"speedup: {timings['numpy'] / timings['numba']:.1f}x")
    os.environ.pop("RADIOFIELD3D_NO_NUMBA", None)


if __name__ == "__main__":
    main()
