"""RM3D binary container for radio volumes and building-height maps.

Layout (little-endian):

    magic   "RM3D"                      4 bytes
    version u32 (currently 1)           4 bytes
    N, H, W u32 each                    12 bytes
    volume  N*H*W f32 (z-major, row-major within layer)
    heights H*W f32
    meta_len u32
    metadata UTF-8 JSON (meta_len bytes)

The metadata JSON must carry ``altitudes_m`` (N numbers), ``norm_min_db`` and
``norm_max_db`` so stored unit-scale values remain convertible back to dB.
A sample-set sidecar is a CSV with header ``x,y,z,value``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .grids import BuildingHeightMap, RadioVolume, SampleObservation, SampleSet

MAGIC = b"RM3D"
VERSION = 1
REQUIRED_METADATA = ("altitudes_m", "norm_min_db", "norm_max_db")


class VolumeFormatError(ValueError):
    """Malformed RM3D payload; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Scene:
    """One stored scene: volume, height map and its metadata dictionary."""

    volume: RadioVolume
    height_map: BuildingHeightMap
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.height_map.height, self.height_map.width) != (
            self.volume.height,
            self.volume.width,
        ):
            raise ValueError("height map and volume footprints differ")


def save_scene(scene: Scene, dest: Union[str, Path, BinaryIO]) -> None:
    """Serialize a scene to an RM3D byte stream or file path."""
    vol = scene.volume
    n, h, w = vol.data.shape
    metadata = dict(scene.metadata)
    metadata["altitudes_m"] = [float(a) for a in vol.altitudes]
    metadata.setdefault("norm_min_db", 0.0)
    metadata.setdefault("norm_max_db", 0.0)
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", VERSION, n, h, w))
    buf.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(scene.height_map.heights, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    payload = buf.getvalue()

    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(payload)
    else:
        dest.write(payload)


def _read_exact(stream: BinaryIO, count: int, offset: int, what: str) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise VolumeFormatError(f"truncated payload while reading {what}", offset + len(data))
    return data


def load_scene(src: Union[str, Path, bytes, BinaryIO]) -> Scene:
    """Deserialize an RM3D byte stream, file path, or bytes object."""
    if isinstance(src, (str, Path)):
        stream: BinaryIO = io.BytesIO(Path(src).read_bytes())
    elif isinstance(src, bytes):
        stream = io.BytesIO(src)
    else:
        stream = src

    offset = 0
    magic = _read_exact(stream, 4, offset, "magic")
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    offset += 4

    header = _read_exact(stream, 16, offset, "header")
    version, n, h, w = struct.unpack("<IIII", header)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version}", offset)
    offset += 16

    vol_bytes = 4 * n * h * w
    data = np.frombuffer(_read_exact(stream, vol_bytes, offset, "volume data"), dtype="<f4")
    offset += vol_bytes
    heights_bytes = 4 * h * w
    heights = np.frombuffer(
        _read_exact(stream, heights_bytes, offset, "height map"), dtype="<f4"
    )
    offset += heights_bytes

    meta_len = struct.unpack("<I", _read_exact(stream, 4, offset, "metadata length"))[0]
    offset += 4
    meta_bytes = _read_exact(stream, meta_len, offset, "metadata")
    try:
        metadata = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"metadata is not valid JSON ({exc})", offset) from exc
    for key in REQUIRED_METADATA:
        if key not in metadata:
            raise VolumeFormatError(f"metadata is missing required key {key!r}", offset)
    altitudes = np.asarray(metadata["altitudes_m"], dtype=np.float64)
    if altitudes.shape != (n,):
        raise VolumeFormatError(
            f"metadata lists {altitudes.size} altitudes for {n} layers", offset
        )

    volume = RadioVolume(data=data.reshape(n, h, w).copy(), altitudes=altitudes)
    height_map = BuildingHeightMap(heights=heights.reshape(h, w).astype(np.float64))
    return Scene(volume=volume, height_map=height_map, metadata=metadata)


def save_samples_csv(samples: SampleSet, path: Union[str, Path]) -> None:
    """Write a sample-set sidecar CSV with header ``x,y,z,value``."""
    lines = ["x,y,z,value"]
    for o in samples.observations:
        lines.append(f"{o.x!r},{o.y!r},{o.z!r},{o.value!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples_csv(path: Union[str, Path]) -> SampleSet:
    """Read a sample-set sidecar CSV written by :func:`save_samples_csv`."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0].strip() != "x,y,z,value":
        raise ValueError(f"{path}: expected header 'x,y,z,value'")
    observations = []
    for line in lines[1:]:
        x, y, z, v = (float(part) for part in line.split(","))
        observations.append(SampleObservation(x=x, y=y, z=z, value=v))
    return SampleSet(observations=tuple(observations))
