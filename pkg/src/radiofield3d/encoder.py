"""Dual-stream feature encoders: sparse-sample tokens and building-map tokens.

The point stream lifts each observation to a token: a Fourier positional
encoding of its (unit-normalized) coordinate feeds a coordinate MLP, a second
MLP predicts a strictly positive adaptive radius from (position, value), and
a residual FiLM head modulates the geometric token with coefficients derived
from (position, value, radius).

The map stream embeds non-overlapping patches of the normalized height map,
adds a learned positional embedding, and runs a stack of pre-norm multi-head
self-attention blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    """Sizes for both encoder streams."""

    num_freqs: int = 6
    d_model: int = 128
    patch_size: int = 8
    depth: int = 4
    heads: int = 4
    film_alpha: float = 0.1
    radius_epsilon: float = 1e-3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.num_freqs < 1:
            raise ValueError("need at least one Fourier frequency")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.radius_epsilon <= 0:
            raise ValueError("radius epsilon must be positive")


def init_weights(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) weights and zero biases, applied in place."""
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def fourier_encode(points: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """Sin/cos features of 3D points at dyadic frequencies.

    Args:
        points: ``(..., 3)`` coordinates, expected in ``[0, 1]``.
        num_freqs: number of frequency octaves ``K``.

    Returns:
        ``(..., 6 * K)`` tensor laid out as ``[sin_k, cos_k]`` per frequency.
    """
    blocks = []
    for k in range(num_freqs):
        scaled = points * (2.0**k * math.pi)
        blocks.append(torch.sin(scaled))
        blocks.append(torch.cos(scaled))
    return torch.cat(blocks, dim=-1)


class PointEncoder(nn.Module):
    """Signal-aware tokens for sparse 3D observations."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.coord_mlp = nn.Sequential(
            nn.Linear(6 * config.num_freqs, d), nn.GELU(), nn.Linear(d, d)
        )
        self.radius_mlp = nn.Sequential(nn.Linear(4, 32), nn.GELU(), nn.Linear(32, 1))
        self.film_mlp = nn.Sequential(nn.Linear(5, d), nn.GELU(), nn.Linear(d, 2 * d))
        self.apply(init_weights)

    def forward(
        self, coords: torch.Tensor, values: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode observations into modulated tokens.

        Args:
            coords: ``(B, k, 3)`` unit-normalized sample coordinates.
            values: ``(B, k)`` observed power values.

        Returns:
            tokens ``(B, k, D)`` and adaptive radii ``(B, k)``.
        """
        if not torch.isfinite(coords).all() or not torch.isfinite(values).all():
            raise ValueError("point encoder inputs must be finite")
        v = values.unsqueeze(-1)
        h = self.coord_mlp(fourier_encode(coords, self.config.num_freqs))
        radius = (
            F.softplus(self.radius_mlp(torch.cat([coords, v], dim=-1)))
            + self.config.radius_epsilon
        )
        condition = torch.cat([coords, v, radius], dim=-1)
        gamma, beta = self.film_mlp(condition).chunk(2, dim=-1)
        tokens = (1.0 + self.config.film_alpha * torch.tanh(gamma)) * h + beta
        return tokens, radius.squeeze(-1)


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention followed by an MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(
        self, x: torch.Tensor, return_attn: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        b, t, d = x.shape
        qkv = self.qkv(self.norm1(x))
        q, k, v = qkv.reshape(b, t, 3, self.heads, self.head_dim).permute(
            2, 0, 3, 1, 4
        )  # each (B, heads, T, head_dim)
        attn = torch.softmax(
            q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1
        )
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.norm2(x))
        return x, (attn if return_attn else None)


class MapEncoder(nn.Module):
    """Patch-token self-attention encoder over the building-height map."""

    def __init__(self, config: EncoderConfig, height: int, width: int):
        super().__init__()
        if height % config.patch_size or width % config.patch_size:
            raise ValueError(
                f"patch size {config.patch_size} must divide map size "
                f"{height}x{width}"
            )
        self.config = config
        self.tokens_h = height // config.patch_size
        self.tokens_w = width // config.patch_size
        d = config.d_model
        self.patch_embed = nn.Conv2d(
            1, d, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(
            torch.zeros(1, self.tokens_h * self.tokens_w, d)
        )
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(d, config.heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(
        self, height_map: torch.Tensor, return_attn: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Encode a ``(B, 1, H, W)`` normalized map into ``(B, T, D)`` tokens."""
        x = self.patch_embed(height_map)  # (B, D, H/p, W/p)
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        attn_maps = []
        for block in self.blocks:
            x, attn = block(x, return_attn=return_attn)
            if attn is not None:
                attn_maps.append(attn)
        return x, attn_maps
