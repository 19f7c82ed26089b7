"""Synthetic 3D radio scenes from a log-distance path-loss model.

Each scene pairs a building-height map (axis-aligned rectangular prisms,
rejection-sampled so footprints never overlap) with a dense radio volume. The
attenuation at a voxel a distance ``d`` from the transmitter is

    PL(d) = PL(d0) + 10 * n * log10(d / d0) + X_sigma

with reference distance ``d0`` = 1 m. Shadowing ``X_sigma`` is a per-voxel
Gaussian term plus a deterministic penalty proportional to the obstructed
path length through buildings, which gives the volume its building-correlated
vertical structure. Voxels strictly inside buildings take the maximum
attenuation. dB values are mapped to unit scale with fixed dataset-wide
bounds so scenes stay comparable: 0 is the deepest attenuation, 1 the
strongest signal.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .grids import BuildingHeightMap, RadioVolume
from .kernels import obstructed_lengths
from .rm3d import Scene, save_scene

REFERENCE_DISTANCE_M = 1.0
MAX_LAYOUT_RETRIES = 50
# Smallest value assigned to outdoor voxels; keeps building interiors the
# unique zeros so occupancy is recoverable from the volume.
OUTDOOR_VALUE_FLOOR = 1.0 / 65535.0

SPLIT_FRACTIONS = {"train": 0.7, "val": 0.1}


@dataclass(frozen=True)
class SceneConfig:
    """Geometry, propagation and normalization parameters for one scene."""

    width: int = 64
    height: int = 64
    n_layers: int = 8
    num_buildings: int = 4
    building_height_range: Optional[tuple[float, float]] = None
    building_footprint_range: Optional[tuple[int, int]] = None
    tx_position: Optional[tuple[float, float, float]] = None
    tx_power_offset_db: float = 40.0
    path_loss_exponent: float = 2.5
    shadow_sigma_db: float = 1.0
    shadow_per_blocked_meter_db: float = 1.5
    norm_min_db: float = 40.0
    norm_max_db: float = 140.0
    seed: int = 0

    def __post_init__(self):
        if self.path_loss_exponent <= 0:
            raise ValueError("path loss exponent must be positive")
        if self.shadow_sigma_db < 0:
            raise ValueError("shadow sigma must be non-negative")
        if self.width < 2 or self.height < 2 or self.n_layers < 1:
            raise ValueError("grid must be at least 2x2 with one layer")
        if self.building_height_range is None:
            # Buildings from 2 m up to one layer below the scene top, so some
            # prisms pierce several layers while the top layer stays clear.
            hi = max(1.0, self.max_scene_height - 1.0)
            object.__setattr__(self, "building_height_range", (min(2.0, hi), hi))
        if self.building_footprint_range is None:
            # Footprints scale with the grid so layouts stay placeable.
            side = min(self.width, self.height)
            object.__setattr__(
                self,
                "building_footprint_range",
                (max(2, side // 10), max(3, round(side / 4.5))),
            )
        lo, hi = self.building_height_range
        if lo < 0 or hi < lo or hi > self.max_scene_height:
            raise ValueError(
                f"building heights must lie in [0, {self.max_scene_height}]"
            )
        if self.norm_max_db <= self.norm_min_db:
            raise ValueError("norm_max_db must exceed norm_min_db")
        if self.tx_position is not None:
            x, y, z = self.tx_position
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError("tx position outside the grid")
            if not 0 <= z <= self.max_scene_height:
                raise ValueError("tx altitude outside the scene")

    @property
    def altitudes(self) -> np.ndarray:
        """Layer altitudes in meters: 1 m voxels starting at 1 m."""
        return np.arange(1, self.n_layers + 1, dtype=np.float64)

    @property
    def max_scene_height(self) -> float:
        return float(self.n_layers)


def obstructed_length(
    p_a: Sequence[float], p_b: Sequence[float], height_map: BuildingHeightMap
) -> float:
    """Length in meters of the segment a->b passing through building cells.

    The segment is stepped uniformly at a resolution of at most 0.25 m; a
    sample counts as blocked when the building height at its cell exceeds the
    segment height there. A degenerate zero-length segment returns 0.
    """
    src = np.asarray(p_a, dtype=np.float64)
    target = np.asarray(p_b, dtype=np.float64).reshape(1, 3)
    return float(obstructed_lengths(src, target, height_map.heights)[0])


def _place_buildings(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    heights = np.zeros((config.height, config.width))
    lo_fp, hi_fp = config.building_footprint_range
    lo_h, hi_h = config.building_height_range
    placed = 0
    attempts = 0
    max_attempts = 200 * max(1, config.num_buildings)
    while placed < config.num_buildings:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"could not place {config.num_buildings} non-overlapping buildings"
            )
        attempts += 1
        w = int(rng.integers(lo_fp, hi_fp + 1))
        h = int(rng.integers(lo_fp, hi_fp + 1))
        if w >= config.width or h >= config.height:
            continue
        x0 = int(rng.integers(0, config.width - w + 1))
        y0 = int(rng.integers(0, config.height - h + 1))
        if np.any(heights[y0 : y0 + h, x0 : x0 + w] > 0):
            continue
        heights[y0 : y0 + h, x0 : x0 + w] = rng.uniform(lo_h, hi_h)
        placed += 1
    return heights


def _draw_tx(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    if config.tx_position is not None:
        return np.asarray(config.tx_position, dtype=np.float64)
    x = rng.uniform(1.0, config.width - 2.0)
    y = rng.uniform(1.0, config.height - 2.0)
    z = rng.uniform(0.6 * config.max_scene_height, config.max_scene_height)
    return np.array([x, y, z])


def generate_scene(config: SceneConfig) -> Scene:
    """Generate one deterministic scene (volume, height map, metadata)."""
    rng = np.random.default_rng(config.seed)
    tx = None
    heights = None
    for _ in range(MAX_LAYOUT_RETRIES):
        candidate = _place_buildings(config, rng)
        tx = _draw_tx(config, rng)
        ix, iy = int(np.floor(tx[0] + 0.5)), int(np.floor(tx[1] + 0.5))
        if candidate[iy, ix] <= tx[2]:
            heights = candidate
            break
    if heights is None:
        raise RuntimeError("transmitter kept landing inside a building")

    n, rows, cols = config.n_layers, config.height, config.width
    altitudes = config.altitudes
    zz, yy, xx = np.meshgrid(altitudes, np.arange(rows), np.arange(cols), indexing="ij")
    centers = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)

    dist = np.sqrt(np.sum((centers - tx[None, :]) ** 2, axis=1))
    dist = np.maximum(dist, REFERENCE_DISTANCE_M)
    path_loss = config.tx_power_offset_db + 10.0 * config.path_loss_exponent * np.log10(
        dist / REFERENCE_DISTANCE_M
    )
    path_loss += config.shadow_per_blocked_meter_db * obstructed_lengths(
        tx, centers, heights
    )
    if config.shadow_sigma_db > 0:
        path_loss += rng.normal(0.0, config.shadow_sigma_db, size=path_loss.shape)

    span = config.norm_max_db - config.norm_min_db
    clipped = np.clip(path_loss, config.norm_min_db, config.norm_max_db)
    values = (config.norm_max_db - clipped) / span
    values = np.maximum(values, OUTDOOR_VALUE_FLOOR).reshape(n, rows, cols)

    interior = heights[None, :, :] > altitudes[:, None, None]
    values[interior] = 0.0

    metadata = {
        "norm_min_db": config.norm_min_db,
        "norm_max_db": config.norm_max_db,
        "tx_position": [float(v) for v in tx],
        "seed": int(config.seed),
        "path_loss_exponent": config.path_loss_exponent,
    }
    volume = RadioVolume(data=values.astype(np.float32), altitudes=altitudes)
    return Scene(
        volume=volume, height_map=BuildingHeightMap(heights=heights), metadata=metadata
    )


def worker_count() -> int:
    """Worker cap from RADIOFIELD3D_THREADS, defaulting to the CPU count."""
    available = os.cpu_count() or 1
    raw = os.environ.get("RADIOFIELD3D_THREADS", "").strip()
    if not raw:
        return available
    try:
        return max(1, min(available, int(raw)))
    except ValueError:
        return available


def split_counts(count: int) -> dict[str, int]:
    n_train = int(SPLIT_FRACTIONS["train"] * count)
    n_val = int(SPLIT_FRACTIONS["val"] * count)
    return {"train": n_train, "val": n_val, "test": count - n_train - n_val}


def generate_dataset(
    template: SceneConfig, count: int, seed: int, out_dir: Path | str
) -> Path:
    """Generate ``count`` scenes and a 70/10/20 train/val/test manifest.

    Every scene gets its own derived seed, so layouts are disjoint across
    splits. Returns the manifest path.
    """
    if count < 10:
        raise ValueError(f"dataset needs at least 10 scenes, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=count)

    def build(index: int) -> str:
        scene_seed = int(scene_seeds[index])
        scene = generate_scene(replace(template, seed=scene_seed))
        name = f"scene_{index:05d}.rm3d"
        save_scene(scene, out_dir / name)
        return name

    names: list[str] = [""] * count
    workers = worker_count()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for index, name in zip(range(count), pool.map(build, range(count))):
                names[index] = name
    else:
        for index in range(count):
            names[index] = build(index)

    counts = split_counts(count)
    manifest: dict[str, list[dict]] = {}
    start = 0
    for split in ("train", "val", "test"):
        entries = []
        for index in range(start, start + counts[split]):
            entries.append({"path": names[index], "seed": int(scene_seeds[index])})
        manifest[split] = entries
        start += counts[split]

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(manifest_path: Path | str) -> dict[str, list[Path]]:
    """Read a manifest and resolve scene paths relative to its directory."""
    manifest_path = Path(manifest_path)
    raw = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    return {
        split: [base / entry["path"] for entry in entries]
        for split, entries in raw.items()
    }
