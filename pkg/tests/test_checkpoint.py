"""Checkpoint format: round trips, determinism, mismatch detection."""

import struct

import numpy as np
import pytest
import torch

from radiofield3d.checkpoint import load_model, load_tensors, save_checkpoint
from radiofield3d.encoder import EncoderConfig
from radiofield3d.fusion import build_model

TINY = EncoderConfig(num_freqs=2, d_model=16, patch_size=4, depth=1, heads=2)


def tiny_model(seed=0):
    return build_model(
        16, 16, np.arange(1.0, 4.0), TINY, seed=seed,
        base_channels=16, channel_floor=8, groupnorm_groups=4,
    )


class TestCheckpointRoundTrip:
    def test_state_survives_round_trip(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        restored = load_model(path)
        for (name_a, a), (name_b, b) in zip(
            model.state_dict().items(), restored.state_dict().items()
        ):
            assert name_a == name_b
            assert torch.equal(a, b), name_a

    def test_predictions_match_after_reload(self, tmp_path):
        model = tiny_model(seed=1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        restored = load_model(path)
        heights = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(2))
        coords = torch.rand(1, 4, 3) * 3
        values = torch.rand(1, 4)
        with torch.no_grad():
            assert torch.equal(
                model(heights, coords, values), restored(heights, coords, values)
            )

    def test_identical_models_serialize_identically(self, tmp_path):
        a, b = tiny_model(seed=3), tiny_model(seed=3)
        path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, path_a)
        save_checkpoint(b, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_header_carries_configs(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        header, tensors = load_tensors(path)
        assert header["encoder"]["d_model"] == 16
        assert header["decoder"]["out_layers"] == 3
        assert header["grid"]["altitudes"] == [1.0, 2.0, 3.0]
        assert "render_k" in tensors and "render_t" in tensors
        assert tensors["render_k"].shape == ()

    def test_tensor_records_are_little_endian_f32(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        header_len = struct.unpack("<I", raw[:4])[0]
        n_tensors = struct.unpack(
            "<I", raw[4 + header_len : 8 + header_len]
        )[0]
        assert n_tensors == len(model.state_dict())


class TestCheckpointErrors:
    def test_mismatched_tensor_names_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        header_len = struct.unpack("<I", raw[:4])[0]
        name_len_off = 4 + header_len + 4
        name_len = struct.unpack(
            "<I", raw[name_len_off : name_len_off + 4]
        )[0]
        name_start = name_len_off + 4
        raw[name_start : name_start + name_len] = b"x" * name_len
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="does not match"):
            load_model(bad)

    def test_truncated_checkpoint_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        bad = tmp_path / "short.ckpt"
        bad.write_bytes(path.read_bytes()[:100])
        with pytest.raises(ValueError, match="truncated"):
            load_tensors(bad)
