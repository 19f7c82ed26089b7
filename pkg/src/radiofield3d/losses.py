"""Multi-granularity training objective for weakly supervised volumes.

Three differentiable terms share a robust Huber regression core:

* volume level - direct supervision at labeled altitude layers plus a
  weighted fit to the piecewise-linear pseudo-label volume;
* map level - a vertical transmittance rendering converts the predicted
  volume into a building-height estimate compared against the ground truth;
* point level - per-altitude-bin moment matching of predicted vs observed
  sample values plus Jensen-Shannon alignment of their soft histograms.

All functions accept torch tensors (any float dtype) and stay differentiable
with respect to the prediction and, where noted, the rendering parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .grids import SupervisionSpec

LOSS_CSV_HEADER = "step,L_total,L_v,L_r,L_p,L_v_sup,L_v_pl"

# Keeps sqrt differentiable when a bin's predicted variance collapses to zero;
# shifts the standard deviation by at most 1e-12.
_STD_EPS = 1e-24


@dataclass(frozen=True)
class LossWeights:
    """Term weights and the shared Huber threshold."""

    lambda_v: float = 1.0
    lambda_r: float = 0.05
    lambda_p: float = 0.1
    lambda_pl: float = 0.3
    huber_delta: float = 0.1

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_r, self.lambda_p, self.lambda_pl) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber delta must be positive")


@dataclass(frozen=True)
class RenderParams:
    """Density mapping and traversal for the height rendering.

    ``k_gain`` and ``t_threshold`` are the learnable density parameters (they
    may be tensors during training). ``delta_z`` lists the N-1 intervals
    between adjacent altitudes in meters; the final traversal sample reuses
    the last interval it passed.
    """

    k_gain: float | torch.Tensor = 10.0
    t_threshold: float | torch.Tensor = 0.5
    delta_z: tuple[float, ...] = ()
    top_down: bool = True

    def __post_init__(self):
        if any(dz <= 0 for dz in self.delta_z):
            raise ValueError("altitude intervals must be positive")

    @classmethod
    def for_altitudes(
        cls,
        altitudes: Sequence[float],
        k_gain: float | torch.Tensor = 10.0,
        t_threshold: float | torch.Tensor = 0.5,
        top_down: bool = True,
    ) -> "RenderParams":
        alts = np.asarray(altitudes, dtype=np.float64)
        return cls(
            k_gain=k_gain,
            t_threshold=t_threshold,
            delta_z=tuple(float(d) for d in np.diff(alts)),
            top_down=top_down,
        )


@dataclass(frozen=True)
class PixelLossConfig:
    """Binning for the point-level statistics."""

    altitude_bins: int = 8
    hist_bins: int = 2
    hist_bandwidth: float = 0.5

    def __post_init__(self):
        if self.altitude_bins < 1:
            raise ValueError("need at least one altitude bin")
        if self.hist_bins < 2:
            raise ValueError("need at least two histogram bins")
        if self.hist_bandwidth <= 0:
            raise ValueError("histogram bandwidth must be positive")

    @classmethod
    def with_default_bandwidth(
        cls, altitude_bins: int = 8, hist_bins: int = 2
    ) -> "PixelLossConfig":
        """Bandwidth set to half the spacing between histogram bin centers."""
        return cls(
            altitude_bins=altitude_bins,
            hist_bins=hist_bins,
            hist_bandwidth=0.5 / (hist_bins - 1),
        )


@dataclass
class LossReport:
    """Per-term loss values from one objective evaluation."""

    total: torch.Tensor
    volume: torch.Tensor
    rendering: torch.Tensor
    pixel: torch.Tensor
    volume_supervised: torch.Tensor
    volume_pseudo: torch.Tensor

    def csv_row(self, step: int) -> str:
        values = (
            self.total,
            self.volume,
            self.rendering,
            self.pixel,
            self.volume_supervised,
            self.volume_pseudo,
        )
        return ",".join([str(step)] + [f"{float(v):.10g}" for v in values])


def huber(pred: torch.Tensor, target: torch.Tensor, delta: float) -> torch.Tensor:
    """Robust regression loss: quadratic inside ``delta``, linear outside.

    Element-wise values are averaged over all entries, so a scalar input
    returns the scalar loss itself.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    err = pred - target
    abs_err = err.abs()
    quadratic = 0.5 * err * err
    linear = delta * (abs_err - 0.5 * delta)
    return torch.where(abs_err <= delta, quadratic, linear).mean()


def linear_volume_loss(
    pred: torch.Tensor,
    supervised_slices: torch.Tensor,
    supervised_indices: Sequence[int],
    pseudo: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Supervised-layer Huber average plus weighted pseudo-label fit.

    Args:
        pred: ``(N, H, W)`` predicted volume.
        supervised_slices: ``(N_s, H, W)`` ground-truth slices.
        supervised_indices: layer index of each supervised slice.
        pseudo: ``(N, H, W)`` pseudo-label volume.
        weights: supplies ``lambda_pl`` and the Huber threshold.

    Returns:
        (loss, supervised term, pseudo term).
    """
    indices = list(supervised_indices)
    if any(i < 0 or i >= pred.shape[0] for i in indices):
        raise ValueError(f"supervised index out of range for {pred.shape[0]} layers")
    supervised = huber(pred[indices], supervised_slices, weights.huber_delta)
    pseudo_term = huber(pred, pseudo, weights.huber_delta)
    return supervised + weights.lambda_pl * pseudo_term, supervised, pseudo_term


def composite_weights(
    density: torch.Tensor, dz: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Opacity, accumulated transmittance and sample weights along dim -3.

    ``density`` holds per-sample densities in traversal order; ``dz`` is the
    per-sample interval. Returns ``(alpha, transmittance, weights)`` where
    ``alpha = 1 - exp(-density * dz)``, transmittance starts at 1 and decays
    by ``1 - alpha``, and ``weights = transmittance * alpha``.
    """
    alpha = 1.0 - torch.exp(-density * dz.reshape(-1, 1, 1))
    ones = torch.ones_like(alpha[..., :1, :, :])
    transmittance = torch.cumprod(
        torch.cat([ones, 1.0 - alpha], dim=-3), dim=-3
    )[..., :-1, :, :]
    return alpha, transmittance, transmittance * alpha


def _traversal(altitudes, n: int, params: RenderParams):
    alts = np.asarray(altitudes, dtype=np.float64)
    if alts.shape != (n,):
        raise ValueError(f"expected {n} altitudes, got {alts.shape}")
    if n > 1:
        if len(params.delta_z) != n - 1:
            raise ValueError(f"expected {n - 1} altitude intervals")
        ascending_dz = np.asarray(params.delta_z, dtype=np.float64)
    else:
        ascending_dz = np.asarray([max(float(alts[0]), 1.0)])

    if params.top_down:
        order = np.arange(n - 1, -1, -1)
        # The last traversal sample (the bottom layer) reuses the interval
        # directly above it.
        dz = np.concatenate([ascending_dz[::-1], ascending_dz[:1]]) if n > 1 else ascending_dz
    else:
        order = np.arange(n)
        dz = np.concatenate([ascending_dz, ascending_dz[-1:]]) if n > 1 else ascending_dz
    return alts, order, dz[:n]


def render_heights(
    pred: torch.Tensor, altitudes: Sequence[float], params: RenderParams
) -> torch.Tensor:
    """Differentiable vertical compositing of a volume into a height map.

    Per column, samples are visited top-down by default; each sample's value
    becomes a density through ``sigmoid(k * (v - t))``, an opacity through
    ``1 - exp(-density * dz)``, and contributes its altitude weighted by
    opacity times accumulated transmittance.

    Args:
        pred: ``(..., N, H, W)`` volume.
        altitudes: N layer altitudes in meters (ascending).
        params: density gain/threshold and altitude intervals.

    Returns:
        ``(..., H, W)`` rendered heights in meters.
    """
    n = pred.shape[-3]
    alts, order, dz = _traversal(altitudes, n, params)
    values = pred[..., order, :, :]
    z = torch.as_tensor(alts[order], dtype=pred.dtype, device=pred.device)
    dz_t = torch.as_tensor(dz, dtype=pred.dtype, device=pred.device)

    k = params.k_gain if torch.is_tensor(params.k_gain) else pred.new_tensor(params.k_gain)
    t = (
        params.t_threshold
        if torch.is_tensor(params.t_threshold)
        else pred.new_tensor(params.t_threshold)
    )
    density = torch.sigmoid(k * (values - t))
    _, _, weights = composite_weights(density, dz_t)
    return (weights * z.reshape(-1, 1, 1)).sum(dim=-3)


def radio_rendering_loss(
    pred: torch.Tensor,
    altitudes: Sequence[float],
    height_map: torch.Tensor,
    params: RenderParams,
    delta: float,
    max_height: float,
) -> torch.Tensor:
    """Huber distance between rendered and true heights, unit-normalized."""
    if max_height <= 0:
        raise ValueError("max scene height must be positive")
    rendered = render_heights(pred, altitudes, params)
    return huber(rendered / max_height, height_map / max_height, delta)


def soft_histogram(
    values: torch.Tensor, bins: int, bandwidth: float
) -> torch.Tensor:
    """Differentiable Gaussian-kernel histogram over ``[0, 1]``.

    Bin centers are evenly spaced on ``[0, 1]`` (endpoints included). Each
    value's kernel weights are normalized to sum to one and then averaged
    over values, so the result is a probability vector.
    """
    if values.numel() == 0:
        raise ValueError("cannot histogram an empty value set")
    if bins < 2:
        raise ValueError("need at least two histogram bins")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    centers = torch.linspace(0.0, 1.0, bins, dtype=values.dtype, device=values.device)
    sq = (values.reshape(-1, 1) - centers.reshape(1, -1)) ** 2
    weights = torch.exp(-sq / (2.0 * bandwidth**2))
    weights = weights / weights.sum(dim=1, keepdim=True)
    return weights.mean(dim=0)


def js_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log), bounded by ``log 2``."""
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    sums = (float(p.detach().sum()), float(q.detach().sum()))
    if any(abs(s - 1.0) > 1e-6 for s in sums):
        raise ValueError("inputs must be probability vectors summing to 1")
    mix = 0.5 * (p + q)

    def kl(a: torch.Tensor) -> torch.Tensor:
        ratio = torch.where(a > 0, a / mix, torch.ones_like(a))
        return (torch.where(a > 0, a * torch.log(ratio), torch.zeros_like(a))).sum()

    return 0.5 * kl(p) + 0.5 * kl(q)


def lookup_voxels(
    pred: torch.Tensor, altitudes: Sequence[float], coords: torch.Tensor
) -> torch.Tensor:
    """Nearest-voxel values of ``pred`` at voxel-unit sample coordinates."""
    n, rows, cols = pred.shape
    alts = np.asarray(altitudes, dtype=np.float64)
    xy = coords[:, :2].detach().cpu().numpy()
    z = coords[:, 2].detach().cpu().numpy()
    ix = np.clip(np.floor(xy[:, 0] + 0.5).astype(np.int64), 0, cols - 1)
    iy = np.clip(np.floor(xy[:, 1] + 0.5).astype(np.int64), 0, rows - 1)
    if n > 1:
        midpoints = (alts[:-1] + alts[1:]) / 2.0
        iz = np.searchsorted(midpoints, z, side="left")
    else:
        iz = np.zeros_like(z, dtype=np.int64)
    iz_t = torch.as_tensor(iz, device=pred.device, dtype=torch.long)
    iy_t = torch.as_tensor(iy, device=pred.device, dtype=torch.long)
    ix_t = torch.as_tensor(ix, device=pred.device, dtype=torch.long)
    return pred[iz_t, iy_t, ix_t]


def pixel_loss(
    pred: torch.Tensor,
    altitudes: Sequence[float],
    coords: torch.Tensor,
    values: torch.Tensor,
    config: PixelLossConfig,
    delta: float,
) -> torch.Tensor:
    """Moment matching per altitude bin plus soft-histogram JS alignment.

    Samples are partitioned into ``altitude_bins`` uniform bins over
    ``[0, max altitude]``; each non-empty bin contributes Huber losses between
    predicted and observed means and (population) standard deviations. The
    histogram term compares predicted vs observed value distributions over
    all samples.
    """
    if values.numel() == 0:
        raise ValueError("pixel loss needs at least one sample")
    alts = np.asarray(altitudes, dtype=np.float64)
    pred_values = lookup_voxels(pred, alts, coords)

    z = coords[:, 2].detach().cpu().numpy()
    z_max = float(alts[-1])
    bin_index = np.clip(
        np.floor(z / z_max * config.altitude_bins).astype(np.int64),
        0,
        config.altitude_bins - 1,
    )

    loss = pred.new_zeros(())
    for b in range(config.altitude_bins):
        members = np.nonzero(bin_index == b)[0]
        if members.size == 0:
            continue
        idx = torch.as_tensor(members, device=pred.device)
        pv = pred_values[idx]
        ov = values[idx]
        mu_hat, mu = pv.mean(), ov.mean()
        sigma_hat = torch.sqrt(((pv - mu_hat) ** 2).mean() + _STD_EPS)
        sigma = torch.sqrt(((ov - mu) ** 2).mean() + _STD_EPS)
        loss = loss + huber(mu_hat, mu, delta) + huber(sigma_hat, sigma, delta)

    p_hist = soft_histogram(pred_values, config.hist_bins, config.hist_bandwidth)
    q_hist = soft_histogram(values, config.hist_bins, config.hist_bandwidth)
    return loss + js_divergence(p_hist, q_hist)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all voxels (the baseline objective)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    return (diff * diff).mean()


def total_loss(
    pred: torch.Tensor,
    altitudes: Sequence[float],
    supervision: SupervisionSpec,
    supervised_slices: torch.Tensor,
    pseudo: torch.Tensor,
    height_map: torch.Tensor,
    coords: torch.Tensor,
    values: torch.Tensor,
    weights: LossWeights,
    render_params: RenderParams,
    pixel_config: PixelLossConfig,
    max_height: float,
) -> LossReport:
    """Weighted combination of the volume, rendering and pixel terms."""
    volume, supervised, pseudo_term = linear_volume_loss(
        pred, supervised_slices, supervision.layer_indices, pseudo, weights
    )
    rendering = radio_rendering_loss(
        pred, altitudes, height_map, render_params, weights.huber_delta, max_height
    )
    pixel = pixel_loss(pred, altitudes, coords, values, pixel_config, weights.huber_delta)
    total = weights.lambda_v * volume + weights.lambda_r * rendering + weights.lambda_p * pixel
    return LossReport(
        total=total,
        volume=volume,
        rendering=rendering,
        pixel=pixel,
        volume_supervised=supervised,
        volume_pseudo=pseudo_term,
    )
