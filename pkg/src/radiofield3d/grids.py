"""Core grid types for 3D radio maps and sparse spectrum observations.

Conventions used throughout the package:

* Radio volumes are dense ``(N, H, W)`` float grids (altitude-major, then
  row-major within each layer). Values are spectrum power normalized to
  ``[0, 1]`` where 1 is the strongest signal and 0 the deepest attenuation.
* Building-height maps are ``(H, W)`` float grids in meters.
* Sample coordinates are in voxel units: ``x`` indexes columns in ``[0, W)``,
  ``y`` indexes rows in ``[0, H)``, and ``z`` is the altitude in meters.

All types are treated as immutable after construction; operations never
mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RadioVolume:
    """Dense 3D radio map with one ``(H, W)`` layer per altitude.

    Attributes:
        data: ``(N, H, W)`` array of normalized power values in ``[0, 1]``.
        altitudes: ``(N,)`` array of layer altitudes in meters, strictly
            increasing.
    """

    data: np.ndarray
    altitudes: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        altitudes = np.asarray(self.altitudes, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be (N, H, W), got shape {data.shape}")
        if altitudes.ndim != 1 or altitudes.shape[0] != data.shape[0]:
            raise ValueError(
                f"altitudes must have length {data.shape[0]}, got shape {altitudes.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        if data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise ValueError("volume data must lie in [0, 1]")
        if not np.all(np.isfinite(altitudes)):
            raise ValueError("altitudes contain non-finite values")
        if altitudes.shape[0] > 1 and not np.all(np.diff(altitudes) > 0):
            raise ValueError("altitudes must be strictly increasing")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "altitudes", altitudes)

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def max_altitude(self) -> float:
        return float(self.altitudes[-1])


@dataclass(frozen=True)
class BuildingHeightMap:
    """Per-pixel building heights in meters.

    Attributes:
        heights: ``(H, W)`` array, finite and non-negative.
    """

    heights: np.ndarray

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=np.float64)
        if heights.ndim != 2:
            raise ValueError(f"height map must be (H, W), got shape {heights.shape}")
        if not np.all(np.isfinite(heights)):
            raise ValueError("height map contains non-finite values")
        if heights.min(initial=0.0) < 0.0:
            raise ValueError("building heights must be non-negative")
        object.__setattr__(self, "heights", heights)

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    @property
    def width(self) -> int:
        return self.heights.shape[1]


@dataclass(frozen=True)
class SampleObservation:
    """One sparse spectrum measurement: a 3D position plus its power value."""

    x: float
    y: float
    z: float
    value: float

    def __post_init__(self):
        for name in ("x", "y", "z", "value"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"observation field {name!r} is not finite")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"observation value {self.value} outside [0, 1]")

    @property
    def position(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class SampleSet:
    """A set of sparse observations feeding the model's point stream."""

    observations: tuple[SampleObservation, ...]

    def __post_init__(self):
        obs = tuple(self.observations)
        if len(obs) < 1:
            raise ValueError("a sample set needs at least one observation")
        positions = {o.position for o in obs}
        if len(positions) != len(obs):
            raise ValueError("sample set contains duplicate coordinates")
        object.__setattr__(self, "observations", obs)

    def __len__(self) -> int:
        return len(self.observations)

    def coords(self) -> np.ndarray:
        """Return the ``(k, 3)`` array of (x, y, z) coordinates."""
        return np.array([o.position for o in self.observations], dtype=np.float64)

    def values(self) -> np.ndarray:
        """Return the ``(k,)`` array of observed power values."""
        return np.array([o.value for o in self.observations], dtype=np.float64)


@dataclass(frozen=True)
class SupervisionSpec:
    """Which altitude layers carry ground truth, and the pseudo-label weight."""

    layer_indices: tuple[int, ...]
    pseudo_label_weight: float = 0.3

    def __post_init__(self):
        idx = tuple(int(i) for i in self.layer_indices)
        if len(idx) < 1:
            raise ValueError("at least one supervised layer index is required")
        if len(set(idx)) != len(idx):
            raise ValueError("supervised layer indices must be unique")
        if any(i < 0 for i in idx):
            raise ValueError("supervised layer indices must be non-negative")
        if tuple(sorted(idx)) != idx:
            raise ValueError("supervised layer indices must be sorted")
        if self.pseudo_label_weight < 0:
            raise ValueError("pseudo-label weight must be non-negative")
        object.__setattr__(self, "layer_indices", idx)

    def validate_for(self, n_layers: int) -> None:
        if self.layer_indices[-1] >= n_layers:
            raise ValueError(
                f"supervised index {self.layer_indices[-1]} out of range for "
                f"{n_layers} layers"
            )

    def unlabeled_indices(self, n_layers: int) -> tuple[int, ...]:
        labeled = set(self.layer_indices)
        return tuple(i for i in range(n_layers) if i not in labeled)


def build_pseudo_volume(
    supervised_slices: Sequence[np.ndarray],
    supervised_altitudes: Sequence[float],
    target_altitudes: Sequence[float],
) -> RadioVolume:
    """Densify sparse altitude supervision by piecewise-linear interpolation.

    Each target layer is a linear blend of the two supervised slices whose
    altitudes bracket it; targets below the first (above the last) supervised
    altitude are clamped to the first (last) slice. Targets that coincide with
    a supervised altitude reproduce that slice exactly (no arithmetic).

    Args:
        supervised_slices: ``N_s`` arrays of shape ``(H, W)``.
        supervised_altitudes: strictly increasing altitudes (meters) of the
            supervised slices.
        target_altitudes: strictly increasing altitudes of the output layers.

    Returns:
        RadioVolume with one layer per target altitude.
    """
    slices = np.asarray(supervised_slices)
    sup_alt = np.asarray(supervised_altitudes, dtype=np.float64)
    if slices.ndim != 3 or slices.shape[0] == 0:
        raise ValueError("need at least one supervised slice of shape (H, W)")
    if sup_alt.shape != (slices.shape[0],):
        raise ValueError("one altitude per supervised slice is required")
    if sup_alt.shape[0] > 1 and not np.all(np.diff(sup_alt) > 0):
        raise ValueError("supervised altitudes must be strictly increasing")

    layers = []
    for z in np.asarray(target_altitudes, dtype=np.float64):
        if z <= sup_alt[0]:
            layers.append(slices[0].copy())
        elif z >= sup_alt[-1]:
            layers.append(slices[-1].copy())
        else:
            k = int(np.searchsorted(sup_alt, z, side="right")) - 1
            if sup_alt[k] == z:
                layers.append(slices[k].copy())
            else:
                w = (z - sup_alt[k]) / (sup_alt[k + 1] - sup_alt[k])
                layers.append(slices[k] + w * (slices[k + 1] - slices[k]))
    return RadioVolume(data=np.stack(layers), altitudes=np.asarray(target_altitudes))


def sample_observations(volume: RadioVolume, k: int, seed: int) -> SampleSet:
    """Draw ``k`` distinct voxel-center observations uniformly from a volume.

    Sampling is without replacement over all ``N * H * W`` voxels and is
    deterministic for a fixed seed. The observed value is the volume value at
    the sampled voxel; ``z`` is the layer altitude in meters.
    """
    n_vox = volume.data.size
    if not 1 <= k <= n_vox:
        raise ValueError(f"k must be in [1, {n_vox}], got {k}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(n_vox, size=k, replace=False)
    iz, iy, ix = np.unravel_index(flat, volume.data.shape)
    observations = tuple(
        SampleObservation(
            x=float(x),
            y=float(y),
            z=float(volume.altitudes[z]),
            value=float(volume.data[z, y, x]),
        )
        for z, y, x in zip(iz, iy, ix)
    )
    return SampleSet(observations=observations)
