"""Cross-stream fusion and the volumetric multi-height decoder.

Map tokens query the point tokens through a single multi-head cross-attention
block (residual + layer norm); the fused tokens are reshaped to a feature map
and decoded by a convolutional stack - residual blocks with GroupNorm/Swish,
a Non-Local self-attention block at the lowest resolution, and nearest-
neighbor upsampling from the second stage onward - into an ``(N, H, W)``
volume squashed to ``[0, 1]`` by a sigmoid head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderConfig, MapEncoder, PointEncoder, init_weights
from .grids import BuildingHeightMap, RadioVolume, SampleSet


@dataclass(frozen=True)
class DecoderConfig:
    """Shape of the convolutional decoding stack."""

    out_layers: int
    stages: int = 4
    base_channels: int = 128
    nonlocal_stages: tuple[int, ...] = (0,)
    channel_floor: int = 32
    groupnorm_groups: int = 8

    def __post_init__(self):
        if self.out_layers < 1 or self.stages < 1:
            raise ValueError("decoder needs at least one stage and one output layer")
        if self.base_channels < self.channel_floor:
            raise ValueError("base_channels must be at least the channel floor")

    def stage_channels(self, stage: int) -> int:
        return max(self.channel_floor, self.base_channels // (2**stage))


class CrossAttentionFuser(nn.Module):
    """Map tokens attend over point tokens (queries from the map stream)."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.head_dim = d_model // heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.proj = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.apply(init_weights)

    def forward(
        self,
        map_tokens: torch.Tensor,
        point_tokens: torch.Tensor,
        return_attn: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Fuse ``(B, T, D)`` map tokens with ``(B, k, D)`` point tokens."""
        if map_tokens.shape[-1] != point_tokens.shape[-1]:
            raise ValueError("map and point token dimensions differ")
        b, t, d = map_tokens.shape
        k = point_tokens.shape[1]
        q = self.w_q(map_tokens).reshape(b, t, self.heads, self.head_dim).transpose(1, 2)
        key = self.w_k(point_tokens).reshape(b, k, self.heads, self.head_dim).transpose(1, 2)
        val = self.w_v(point_tokens).reshape(b, k, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ key.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ val).transpose(1, 2).reshape(b, t, d)
        fused = self.norm(map_tokens + self.proj(out))
        return fused, (attn if return_attn else None)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class NonLocalBlock(nn.Module):
    """Spatial self-attention over feature-map positions.

    The output projection is zero-initialized so the block starts as the
    identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 2)
        self.inner = inner
        self.theta = nn.Conv2d(channels, inner, 1)
        self.phi = nn.Conv2d(channels, inner, 1)
        self.g = nn.Conv2d(channels, inner, 1)
        self.out = nn.Conv2d(inner, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        theta = self.theta(x).flatten(2).transpose(1, 2)  # (B, HW, inner)
        phi = self.phi(x).flatten(2)  # (B, inner, HW)
        g = self.g(x).flatten(2).transpose(1, 2)
        attn = torch.softmax(theta @ phi / math.sqrt(self.inner), dim=-1)
        y = (attn @ g).transpose(1, 2).reshape(b, self.inner, h, w)
        return x + self.out(y)


class VolumeDecoder(nn.Module):
    """Progressive upsampling from fused tokens to an ``(N, H, W)`` volume."""

    def __init__(self, config: DecoderConfig, d_model: int, token_side: int):
        super().__init__()
        self.config = config
        self.token_side = token_side
        self.conv_in = nn.Conv2d(d_model, config.base_channels, 3, padding=1)
        stages = []
        for stage in range(config.stages):
            channels = config.stage_channels(stage)
            layers: list[nn.Module] = []
            if stage > 0:
                layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
                layers.append(
                    nn.Conv2d(config.stage_channels(stage - 1), channels, 3, padding=1)
                )
            layers.append(ResidualBlock(channels, config.groupnorm_groups))
            layers.append(ResidualBlock(channels, config.groupnorm_groups))
            if stage in config.nonlocal_stages:
                layers.append(NonLocalBlock(channels))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        last = config.stage_channels(config.stages - 1)
        self.head_norm = nn.GroupNorm(config.groupnorm_groups, last)
        self.head_conv = nn.Conv2d(last, config.out_layers, 3, padding=1)
        self.apply(init_weights)
        for module in self.modules():
            if isinstance(module, NonLocalBlock):
                nn.init.zeros_(module.out.weight)
                nn.init.zeros_(module.out.bias)

    @property
    def output_side(self) -> int:
        return self.token_side * 2 ** (self.config.stages - 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Decode ``(B, T, D)`` tokens into a ``(B, N, H, W)`` volume."""
        b, t, d = tokens.shape
        if t != self.token_side**2:
            raise ValueError(
                f"expected {self.token_side**2} tokens for a "
                f"{self.token_side}x{self.token_side} grid, got {t}"
            )
        x = tokens.transpose(1, 2).reshape(b, d, self.token_side, self.token_side)
        x = self.conv_in(x)
        for stage in self.stages:
            x = stage(x)
        x = self.head_conv(F.silu(self.head_norm(x)))
        return torch.sigmoid(x)


def build_model(
    height: int,
    width: int,
    altitudes: np.ndarray,
    encoder_config: EncoderConfig | None = None,
    seed: int | None = None,
    **decoder_overrides,
) -> "RadioFieldNet":
    """Construct a model for a grid, deriving the decoder stage count.

    The decoder doubles resolution once per stage after the first, so the
    stage count follows from the patch size. Passing ``seed`` makes the
    parameter initialization reproducible.
    """
    encoder_config = encoder_config or EncoderConfig()
    stages = int(round(math.log2(encoder_config.patch_size))) + 1
    decoder_fields = {"out_layers": len(altitudes), "stages": stages}
    decoder_fields.update(decoder_overrides)
    decoder_config = DecoderConfig(**decoder_fields)
    if seed is not None:
        torch.manual_seed(seed)
    return RadioFieldNet(encoder_config, decoder_config, height, width, altitudes)


class RadioFieldNet(nn.Module):
    """Full volumetric reconstructor: encode, fuse, decode.

    The module also owns the learnable density gain ``render_k`` and
    threshold ``render_t`` used by the differentiable height rendering, so a
    checkpoint captures every trainable quantity.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        height: int,
        width: int,
        altitudes: np.ndarray,
    ):
        super().__init__()
        altitudes = np.asarray(altitudes, dtype=np.float64)
        if altitudes.ndim != 1 or altitudes.shape[0] != decoder_config.out_layers:
            raise ValueError("altitudes must list one height per output layer")
        if height != width:
            raise ValueError("the decoder emits square maps; height must equal width")
        token_side = height // encoder_config.patch_size
        if token_side * 2 ** (decoder_config.stages - 1) != height:
            raise ValueError(
                f"token grid {token_side} with {decoder_config.stages} stages "
                f"decodes to {token_side * 2 ** (decoder_config.stages - 1)}, "
                f"expected {height}"
            )
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.grid_height = height
        self.grid_width = width
        self.altitudes = altitudes
        self.max_height = float(altitudes[-1])
        self.map_encoder = MapEncoder(encoder_config, height, width)
        self.point_encoder = PointEncoder(encoder_config)
        self.fuser = CrossAttentionFuser(encoder_config.d_model, encoder_config.heads)
        self.decoder = VolumeDecoder(decoder_config, encoder_config.d_model, token_side)
        self.render_k = nn.Parameter(torch.tensor(10.0))
        self.render_t = nn.Parameter(torch.tensor(0.5))

    def normalize_coords(self, coords: torch.Tensor) -> torch.Tensor:
        """Map voxel-unit coordinates into the unit cube."""
        scale = coords.new_tensor(
            [self.grid_width, self.grid_height, self.max_height]
        )
        return coords / scale

    def forward(
        self, heights: torch.Tensor, coords: torch.Tensor, values: torch.Tensor
    ) -> torch.Tensor:
        """Predict ``(B, N, H, W)`` volumes.

        Args:
            heights: ``(B, H, W)`` building heights in meters.
            coords: ``(B, k, 3)`` observation positions in voxel units.
            values: ``(B, k)`` observed power values in ``[0, 1]``.
        """
        height_map = (heights / self.max_height).clamp(0.0, 1.0).unsqueeze(1)
        map_tokens, _ = self.map_encoder(height_map)
        point_tokens, _ = self.point_encoder(self.normalize_coords(coords), values)
        fused, _ = self.fuser(map_tokens, point_tokens)
        return self.decoder(fused)

    @torch.no_grad()
    def predict(self, height_map: BuildingHeightMap, samples: SampleSet) -> RadioVolume:
        """Numpy-in/numpy-out convenience wrapper around :meth:`forward`."""
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            heights = torch.as_tensor(height_map.heights, dtype=dtype).unsqueeze(0)
            coords = torch.as_tensor(samples.coords(), dtype=dtype).unsqueeze(0)
            values = torch.as_tensor(samples.values(), dtype=dtype).unsqueeze(0)
            pred = self(heights, coords, values)[0]
        finally:
            self.train(was_training)
        return RadioVolume(
            data=pred.cpu().numpy().astype(np.float64), altitudes=self.altitudes
        )
