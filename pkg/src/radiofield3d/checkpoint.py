"""Named-tensor binary checkpoints with a JSON config header.

Layout (little-endian):

    header_len  u32
    header      UTF-8 JSON (model configs and grid geometry)
    n_tensors   u32
    per tensor: name_len u32, name UTF-8, rank u32, dims u32 * rank, f32 data

Tensor records appear in state-dict order, so identical models serialize to
identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .encoder import EncoderConfig
from .fusion import DecoderConfig, RadioFieldNet


def model_config_header(model: RadioFieldNet) -> dict:
    enc = model.encoder_config
    dec = model.decoder_config
    return {
        "encoder": {
            "num_freqs": enc.num_freqs,
            "d_model": enc.d_model,
            "patch_size": enc.patch_size,
            "depth": enc.depth,
            "heads": enc.heads,
            "film_alpha": enc.film_alpha,
            "radius_epsilon": enc.radius_epsilon,
            "mlp_ratio": enc.mlp_ratio,
        },
        "decoder": {
            "out_layers": dec.out_layers,
            "stages": dec.stages,
            "base_channels": dec.base_channels,
            "nonlocal_stages": list(dec.nonlocal_stages),
            "channel_floor": dec.channel_floor,
            "groupnorm_groups": dec.groupnorm_groups,
        },
        "grid": {
            "height": model.grid_height,
            "width": model.grid_width,
            "altitudes": [float(a) for a in model.altitudes],
        },
    }


def save_checkpoint(model: RadioFieldNet, path: Union[str, Path]) -> None:
    """Serialize model configs and all parameters to one binary blob."""
    header = json.dumps(model_config_header(model), sort_keys=True).encode("utf-8")
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        data = tensor.detach().cpu().numpy().astype("<f4")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(np.ascontiguousarray(data).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    """Read the config header and the named tensors from a checkpoint."""
    raw = Path(path).read_bytes()
    stream = io.BytesIO(raw)

    def read(count: int) -> bytes:
        data = stream.read(count)
        if len(data) != count:
            raise ValueError(f"{path}: truncated checkpoint")
        return data

    header_len = struct.unpack("<I", read(4))[0]
    header = json.loads(read(header_len).decode("utf-8"))
    n_tensors = struct.unpack("<I", read(4))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<I", read(4))[0]
        name = read(name_len).decode("utf-8")
        rank = struct.unpack("<I", read(4))[0]
        dims = struct.unpack(f"<{rank}I", read(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(read(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    return header, tensors


def load_model(path: Union[str, Path]) -> RadioFieldNet:
    """Rebuild a model from a checkpoint and load its weights."""
    header, tensors = load_tensors(path)
    enc = EncoderConfig(**header["encoder"])
    dec_fields = dict(header["decoder"])
    dec_fields["nonlocal_stages"] = tuple(dec_fields["nonlocal_stages"])
    dec = DecoderConfig(**dec_fields)
    grid = header["grid"]
    model = RadioFieldNet(
        enc, dec, grid["height"], grid["width"], np.asarray(grid["altitudes"])
    )
    state = {name: torch.as_tensor(arr) for name, arr in tensors.items()}
    missing = set(model.state_dict()) - set(state)
    unexpected = set(state) - set(model.state_dict())
    if missing or unexpected:
        raise ValueError(
            f"{path}: checkpoint does not match model "
            f"(missing={sorted(missing)}, unexpected={sorted(unexpected)})"
        )
    model.load_state_dict(state)
    return model
