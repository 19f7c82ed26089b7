"""Cross-attention fusion, the multi-height decoder, and the full model."""

import numpy as np
import pytest
import torch

from helpers import assert_grads_close, finite_difference_grad

from radiofield3d.encoder import EncoderConfig
from radiofield3d.fusion import (
    CrossAttentionFuser,
    DecoderConfig,
    NonLocalBlock,
    RadioFieldNet,
    VolumeDecoder,
    build_model,
)
from radiofield3d.grids import BuildingHeightMap, SampleSet, SampleObservation

TINY = EncoderConfig(num_freqs=2, d_model=16, patch_size=4, depth=1, heads=2)


def tiny_model(height=16, n_layers=4, seed=0) -> RadioFieldNet:
    return build_model(
        height, height, np.arange(1.0, n_layers + 1), TINY, seed=seed,
        base_channels=16, channel_floor=8, groupnorm_groups=4,
    ).double()


class TestCrossAttention:
    def test_single_key_attention_is_one(self):
        torch.manual_seed(0)
        fuser = CrossAttentionFuser(16, 2).double()
        map_tokens = torch.randn(1, 5, 16, dtype=torch.float64)
        point_tokens = torch.randn(1, 1, 16, dtype=torch.float64)
        fused, attn = fuser(map_tokens, point_tokens, return_attn=True)
        assert torch.equal(attn, torch.ones_like(attn))
        # Pre-residual rows all equal the projected single value vector.
        value = fuser.w_v(point_tokens)  # (1, 1, 16)
        expected = fuser.norm(map_tokens + fuser.proj(value.expand(1, 5, 16)))
        np.testing.assert_allclose(fused.detach(), expected.detach(), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(1)
        fuser = CrossAttentionFuser(16, 4)
        _, attn = fuser(torch.randn(2, 6, 16), torch.randn(2, 9, 16), return_attn=True)
        sums = attn.sum(dim=-1)
        np.testing.assert_allclose(sums.detach(), np.ones(sums.shape), atol=1e-6)

    def test_replicated_keys_match_single_key(self):
        # Identical keys split identical weight over identical values, so any
        # number of copies of one token fuses exactly like the token alone.
        torch.manual_seed(2)
        fuser = CrossAttentionFuser(16, 2).double()
        map_tokens = torch.randn(1, 4, 16, dtype=torch.float64)
        point = torch.randn(1, 1, 16, dtype=torch.float64)
        a, _ = fuser(map_tokens, point)
        b, _ = fuser(map_tokens, point.expand(1, 5, 16))
        np.testing.assert_allclose(a.detach(), b.detach(), atol=1e-6)

    def test_duplicating_a_key_reweights_its_value(self):
        # Softmax renormalizes over keys, so a duplicated token receives twice
        # the mass; verified against an explicit softmax oracle.
        torch.manual_seed(7)
        fuser = CrossAttentionFuser(16, 1).double()
        map_tokens = torch.randn(1, 2, 16, dtype=torch.float64)
        points = torch.randn(1, 3, 16, dtype=torch.float64)
        with_dup = torch.cat([points, points[:, :1]], dim=1)
        _, attn = fuser(map_tokens, with_dup, return_attn=True)
        _, attn_orig = fuser(map_tokens, points, return_attn=True)
        logits_mass = attn_orig[0, 0, :, 0]
        expected_first = 2 * logits_mass / (1.0 + logits_mass)
        np.testing.assert_allclose(
            (attn[0, 0, :, 0] + attn[0, 0, :, 3]).detach(),
            expected_first.detach(),
            atol=1e-12,
        )

    def test_dimension_mismatch_rejected(self):
        fuser = CrossAttentionFuser(16, 2)
        with pytest.raises(ValueError, match="differ"):
            fuser(torch.randn(1, 4, 16), torch.randn(1, 4, 8))


class TestNonLocalBlock:
    def test_identity_at_init(self):
        torch.manual_seed(3)
        block = NonLocalBlock(8).double()
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        assert torch.equal(block(x), x)


class TestVolumeDecoder:
    def test_upsampling_reaches_target_resolution(self):
        torch.manual_seed(4)
        dec = VolumeDecoder(
            DecoderConfig(out_layers=8, stages=4, base_channels=16, channel_floor=8,
                          groupnorm_groups=4),
            d_model=16,
            token_side=8,
        )
        out = dec(torch.randn(1, 64, 16))
        assert out.shape == (1, 8, 64, 64)

    def test_output_range_and_layer_count(self):
        torch.manual_seed(5)
        dec = VolumeDecoder(
            DecoderConfig(out_layers=8, stages=3, base_channels=16, channel_floor=8,
                          groupnorm_groups=4),
            d_model=16,
            token_side=4,
        )
        out = dec(torch.randn(2, 16, 16))
        assert out.shape == (2, 8, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_wrong_token_count(self):
        dec = VolumeDecoder(
            DecoderConfig(out_layers=2, stages=2, base_channels=16, channel_floor=8,
                          groupnorm_groups=4),
            d_model=16,
            token_side=4,
        )
        with pytest.raises(ValueError, match="tokens"):
            dec(torch.randn(1, 9, 16))

    def test_sampled_weight_gradients_match_finite_differences(self):
        torch.manual_seed(6)
        dec = VolumeDecoder(
            DecoderConfig(out_layers=2, stages=2, base_channels=8, channel_floor=8,
                          groupnorm_groups=4),
            d_model=8,
            token_side=2,
        ).double()
        tokens = torch.randn(1, 4, 8, dtype=torch.float64)

        def scalar():
            return dec(tokens).sum()

        loss = scalar()
        rng = np.random.default_rng(0)
        params = list(dec.named_parameters())
        grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
        for pick in rng.choice(len(params), size=4, replace=False):
            name, param = params[pick]
            grad = grads[pick]
            analytic = torch.zeros_like(param) if grad is None else grad
            with torch.no_grad():
                numeric = finite_difference_grad(scalar, param)
            assert_grads_close(analytic, numeric, rtol=1e-4, context=name)


class TestFullModel:
    def _inputs(self, model, k=5, batch=1, seed=0):
        gen = torch.Generator().manual_seed(seed)
        heights = torch.rand(batch, 16, 16, generator=gen, dtype=torch.float64) * 3
        coords = torch.rand(batch, k, 3, generator=gen, dtype=torch.float64)
        coords = coords * torch.tensor([15.0, 15.0, model.max_height])
        values = torch.rand(batch, k, generator=gen, dtype=torch.float64)
        return heights, coords, values

    def test_output_shape_for_any_k(self):
        model = tiny_model()
        for k in (1, 50):
            heights, coords, values = self._inputs(model, k=k)
            out = model(heights, coords, values)
            assert out.shape == (1, 4, 16, 16)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_sample_permutation_invariance(self):
        model = tiny_model(seed=1)
        heights, coords, values = self._inputs(model, k=12, seed=2)
        out = model(heights, coords, values)
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(3))
        out_p = model(heights, coords[:, perm], values[:, perm])
        np.testing.assert_allclose(out_p.detach(), out.detach(), atol=1e-6)

    def test_predict_round_trip_types(self):
        model = tiny_model(seed=2)
        rng = np.random.default_rng(0)
        height_map = BuildingHeightMap(heights=rng.uniform(0, 3, (16, 16)))
        samples = SampleSet(
            observations=(
                SampleObservation(x=3, y=4, z=2.0, value=0.5),
                SampleObservation(x=10, y=2, z=1.0, value=0.25),
            )
        )
        volume = model.predict(height_map, samples)
        assert volume.data.shape == (4, 16, 16)
        np.testing.assert_array_equal(volume.altitudes, model.altitudes)

    def test_geometry_validation(self):
        with pytest.raises(ValueError, match="decodes to"):
            build_model(32, 32, np.arange(1.0, 5.0), TINY, stages=2)
        with pytest.raises(ValueError, match="one height per output layer"):
            build_model(16, 16, np.arange(1.0, 3.0), TINY, out_layers=4)

    def test_render_parameters_are_trainable(self):
        model = tiny_model(seed=3)
        names = {name for name, _ in model.named_parameters()}
        assert "render_k" in names and "render_t" in names
        assert model.render_k.item() == 10.0
        assert model.render_t.item() == 0.5
