"""Reconstruction quality metrics: RMSE, PSNR and windowed SSIM.

All metrics assume unit-scale inputs (values in ``[0, 1]``, dynamic range 1).
SSIM uses uniform 8x8 sliding windows with population statistics and the
conventional stabilizers C1 = 0.01^2, C2 = 0.03^2, averaged over all valid
windows (and over layers for 3D inputs).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

METRIC_CSV_HEADER = "split,layer,rmse,psnr,ssim,labeled"


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Root mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf for an exact match."""
    err = rmse(pred, target)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(1.0 / err)


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sums of all w-by-w sliding windows via a padded integral image."""
    integral = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    integral[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    return (
        integral[w:, w:]
        - integral[:-w, w:]
        - integral[w:, :-w]
        + integral[:-w, :-w]
    )


def _ssim_layer(pred: np.ndarray, target: np.ndarray) -> float:
    w = SSIM_WINDOW
    n = w * w
    mu_p = _window_sums(pred, w) / n
    mu_t = _window_sums(target, w) / n
    var_p = _window_sums(pred * pred, w) / n - mu_p**2
    var_t = _window_sums(target * target, w) / n - mu_t**2
    cov = _window_sums(pred * target, w) / n - mu_p * mu_t
    ssim_map = ((2 * mu_p * mu_t + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_p**2 + mu_t**2 + SSIM_C1) * (var_p + var_t + SSIM_C2)
    )
    return float(ssim_map.mean())


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Structural similarity over 8x8 uniform windows, layer-averaged for 3D."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        layers = [(pred, target)]
    elif pred.ndim == 3:
        layers = [(pred[i], target[i]) for i in range(pred.shape[0])]
    else:
        raise ValueError("ssim expects a 2D layer or a 3D volume")
    if min(layers[0][0].shape) < SSIM_WINDOW:
        raise ValueError(f"layers must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(np.mean([_ssim_layer(p, t) for p, t in layers]))


@dataclass(frozen=True)
class LayerMetrics:
    layer: int
    rmse: float
    psnr: float
    ssim: float
    labeled: bool


@dataclass(frozen=True)
class GroupMetrics:
    rmse: float
    psnr: float
    ssim: float


@dataclass(frozen=True)
class MetricReport:
    """Per-layer metrics plus labeled/unlabeled/overall aggregates."""

    split: str
    per_layer: tuple[LayerMetrics, ...]
    labeled: Optional[GroupMetrics]
    unlabeled: Optional[GroupMetrics]
    overall: GroupMetrics

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(METRIC_CSV_HEADER.split(","))
            for row in self.per_layer:
                writer.writerow(
                    [
                        self.split,
                        row.layer,
                        f"{row.rmse:.10g}",
                        f"{row.psnr:.10g}",
                        f"{row.ssim:.10g}",
                        int(row.labeled),
                    ]
                )
            for name, group, flag in (
                ("labeled", self.labeled, 1),
                ("unlabeled", self.unlabeled, 0),
                ("all", self.overall, ""),
            ):
                if group is None:
                    continue
                writer.writerow(
                    [
                        self.split,
                        name,
                        f"{group.rmse:.10g}",
                        f"{group.psnr:.10g}",
                        f"{group.ssim:.10g}",
                        flag,
                    ]
                )


def _group_from_mse(mse_values: Sequence[float], ssim_values: Sequence[float]) -> GroupMetrics:
    mean_mse = float(np.mean(mse_values))
    group_rmse = math.sqrt(mean_mse)
    group_psnr = math.inf if group_rmse == 0 else 20.0 * math.log10(1.0 / group_rmse)
    return GroupMetrics(rmse=group_rmse, psnr=group_psnr, ssim=float(np.mean(ssim_values)))


def build_report(
    split: str,
    layer_mse: np.ndarray,
    layer_ssim: np.ndarray,
    labeled_indices: Sequence[int],
) -> MetricReport:
    """Assemble a report from per-layer mean squared errors and SSIMs.

    Aggregates pool MSE over layers (so aggregate RMSE^2 is the mean of the
    per-layer RMSE^2 values) and average SSIM.
    """
    n_layers = len(layer_mse)
    labeled = sorted(set(labeled_indices))
    unlabeled = [i for i in range(n_layers) if i not in labeled]
    rows = []
    for i in range(n_layers):
        layer_rmse = math.sqrt(float(layer_mse[i]))
        rows.append(
            LayerMetrics(
                layer=i,
                rmse=layer_rmse,
                psnr=math.inf if layer_rmse == 0 else 20.0 * math.log10(1.0 / layer_rmse),
                ssim=float(layer_ssim[i]),
                labeled=i in labeled,
            )
        )
    labeled_group = (
        _group_from_mse(layer_mse[labeled], layer_ssim[labeled]) if labeled else None
    )
    unlabeled_group = (
        _group_from_mse(layer_mse[unlabeled], layer_ssim[unlabeled]) if unlabeled else None
    )
    overall = _group_from_mse(layer_mse, layer_ssim)
    return MetricReport(
        split=split,
        per_layer=tuple(rows),
        labeled=labeled_group,
        unlabeled=unlabeled_group,
        overall=overall,
    )
