"""Weak-supervision training loop and multi-seed evaluation.

Training is a single deterministic optimization stream: AdamW with decoupled
weight decay, a cosine-annealed learning rate applied per epoch, per-epoch
redrawn sample sets (seeded from config seed, epoch, and scene index), and
gradient clipping as a divergence guard. Validation runs every ``val_every``
epochs on the supervised layers; the best-validation weights are what gets
checkpointed.
"""

from __future__ import annotations

import copy
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_model, save_checkpoint
from .grids import SupervisionSpec, build_pseudo_volume, sample_observations
from .losses import (
    LossReport,
    LossWeights,
    PixelLossConfig,
    RenderParams,
    huber,
    mse_loss,
    pixel_loss,
    radio_rendering_loss,
)
from .metrics import MetricReport, build_report, ssim
from .rm3d import Scene, load_scene
from .scene import load_manifest

TRAIN_LOG_HEADER = "epoch,step,lr,L_total,L_v,L_r,L_p"

OBJECTIVES = ("jsil", "mse-weak", "mse-full")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; records the offending step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at optimizer step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer schedule and supervision mode for one training run."""

    epochs: int = 100
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 4
    val_every: int = 10
    seed: int = 0
    objective: str = "jsil"
    samples_per_scene: int = 50
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr_init <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.samples_per_scene < 1:
            raise ValueError("need at least one sample per scene")


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine anneal from ``lr_init`` (epoch 0) to ``lr_min`` (final epoch)."""
    progress = epoch / config.epochs
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (
        1.0 + math.cos(math.pi * progress)
    )


def derive_seed(*parts) -> int:
    """Stable derived seed from a tuple of ints/strings (process-independent)."""
    encoded = [
        zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p) for p in parts
    ]
    return int(np.random.SeedSequence(encoded).generate_state(1)[0])


@dataclass
class _PreparedScene:
    scene: Scene
    heights: torch.Tensor
    volume: torch.Tensor
    supervised: torch.Tensor
    pseudo: torch.Tensor


def _prepare_scenes(
    scenes: Sequence[Scene], supervision: SupervisionSpec, dtype: torch.dtype
) -> list[_PreparedScene]:
    prepared = []
    for scene in scenes:
        vol = scene.volume
        supervision.validate_for(vol.n_layers)
        indices = list(supervision.layer_indices)
        pseudo = build_pseudo_volume(
            vol.data[indices], vol.altitudes[indices], vol.altitudes
        )
        prepared.append(
            _PreparedScene(
                scene=scene,
                heights=torch.as_tensor(scene.height_map.heights, dtype=dtype),
                volume=torch.as_tensor(np.asarray(vol.data, dtype=np.float64), dtype=dtype),
                supervised=torch.as_tensor(
                    np.asarray(vol.data[indices], dtype=np.float64), dtype=dtype
                ),
                pseudo=torch.as_tensor(
                    np.asarray(pseudo.data, dtype=np.float64), dtype=dtype
                ),
            )
        )
    return prepared


def _draw_batch(
    prepared: Sequence[_PreparedScene],
    indices: Sequence[int],
    k: int,
    seed_parts: tuple,
    dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    heights, coords, values = [], [], []
    for idx in indices:
        item = prepared[idx]
        samples = sample_observations(
            item.scene.volume, k, derive_seed(*seed_parts, idx)
        )
        heights.append(item.heights)
        coords.append(torch.as_tensor(samples.coords(), dtype=dtype))
        values.append(torch.as_tensor(samples.values(), dtype=dtype))
    return torch.stack(heights), torch.stack(coords), torch.stack(values)


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    best_val_rmse: float
    steps: int


def _batch_objective(
    pred: torch.Tensor,
    batch_indices: Sequence[int],
    prepared: Sequence[_PreparedScene],
    coords: torch.Tensor,
    values: torch.Tensor,
    supervision: SupervisionSpec,
    config: TrainConfig,
    weights: LossWeights,
    pixel_config: PixelLossConfig,
    render_params: RenderParams,
    altitudes: np.ndarray,
) -> LossReport:
    zero = pred.new_zeros(())
    if config.objective == "mse-full":
        gt = torch.stack([prepared[i].volume for i in batch_indices])
        total = mse_loss(pred, gt)
        return LossReport(total, zero, zero, zero, zero, zero)
    indices = list(supervision.layer_indices)
    supervised = torch.stack([prepared[i].supervised for i in batch_indices])
    if config.objective == "mse-weak":
        total = mse_loss(pred[:, indices], supervised)
        return LossReport(total, zero, zero, zero, zero, zero)

    pseudo = torch.stack([prepared[i].pseudo for i in batch_indices])
    heights = torch.stack([prepared[i].heights for i in batch_indices])
    max_height = float(altitudes[-1])

    sup_term = huber(pred[:, indices], supervised, weights.huber_delta)
    pseudo_term = huber(pred, pseudo, weights.huber_delta)
    volume = sup_term + weights.lambda_pl * pseudo_term
    rendering = radio_rendering_loss(
        pred, altitudes, heights, render_params, weights.huber_delta, max_height
    )
    pixel = zero
    for row, scene_idx in enumerate(batch_indices):
        pixel = pixel + pixel_loss(
            pred[row], altitudes, coords[row], values[row], pixel_config,
            weights.huber_delta,
        )
    pixel = pixel / len(batch_indices)
    total = weights.lambda_v * volume + weights.lambda_r * rendering + weights.lambda_p * pixel
    return LossReport(total, volume, rendering, pixel, sup_term, pseudo_term)


def _validation_rmse(
    model,
    prepared: Sequence[_PreparedScene],
    supervision: SupervisionSpec,
    config: TrainConfig,
    epoch: int,
    dtype: torch.dtype,
) -> float:
    indices = list(supervision.layer_indices)
    total_sq = 0.0
    count = 0
    model.eval()
    with torch.no_grad():
        for idx in range(len(prepared)):
            heights, coords, values = _draw_batch(
                prepared, [idx], config.samples_per_scene,
                (config.seed, "val", epoch), dtype,
            )
            pred = model(heights, coords, values)[0]
            diff = pred[indices] - prepared[idx].supervised
            total_sq += float((diff * diff).sum())
            count += diff.numel()
    model.train()
    return math.sqrt(total_sq / count)


def train_scenes(
    model,
    train_set: Sequence[Scene],
    val_set: Sequence[Scene],
    supervision: SupervisionSpec,
    config: TrainConfig,
    out_dir: Path | str,
    weights: Optional[LossWeights] = None,
    pixel_config: Optional[PixelLossConfig] = None,
    run_name: str = "model",
) -> TrainResult:
    """Train ``model`` on in-memory scenes; see :func:`train` for files."""
    if not train_set:
        raise ValueError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = weights or LossWeights(lambda_pl=supervision.pseudo_label_weight)
    pixel_config = pixel_config or PixelLossConfig()
    dtype = next(model.parameters()).dtype

    torch.manual_seed(config.seed)
    prepared = _prepare_scenes(train_set, supervision, dtype)
    prepared_val = _prepare_scenes(val_set, supervision, dtype) if val_set else prepared
    altitudes = np.asarray(train_set[0].volume.altitudes)
    render_params = RenderParams.for_altitudes(
        altitudes, k_gain=model.render_k, t_threshold=model.render_t
    )

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr_init, weight_decay=config.weight_decay
    )
    log_rows = [TRAIN_LOG_HEADER]
    best_rmse = math.inf
    best_state = None
    step = 0
    model.train()
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(
            derive_seed(config.seed, "order", epoch)
        ).permutation(len(prepared))
        for start in range(0, len(order), config.batch_size):
            batch = [int(i) for i in order[start : start + config.batch_size]]
            heights, coords, values = _draw_batch(
                prepared, batch, config.samples_per_scene,
                (config.seed, "samples", epoch), dtype,
            )
            pred = model(heights, coords, values)
            report = _batch_objective(
                pred, batch, prepared, coords, values, supervision, config,
                weights, pixel_config, render_params, altitudes,
            )
            if not torch.isfinite(report.total):
                raise TrainingDivergedError(step)
            optimizer.zero_grad()
            report.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            log_rows.append(
                f"{epoch},{step},{lr!r},{report.total.item()!r},"
                f"{report.volume.item()!r},{report.rendering.item()!r},"
                f"{report.pixel.item()!r}"
            )
            step += 1
        if (epoch + 1) % config.val_every == 0 or epoch == config.epochs - 1:
            val_rmse = _validation_rmse(
                model, prepared_val, supervision, config, epoch, dtype
            )
            if val_rmse < best_rmse:
                best_rmse = val_rmse
                best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    checkpoint_path = out_dir / f"{run_name}.ckpt"
    save_checkpoint(model, checkpoint_path)
    log_path = out_dir / f"{run_name}_train_log.csv"
    log_path.write_text("\n".join(log_rows) + "\n")
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        best_val_rmse=best_rmse,
        steps=step,
    )


def train(
    model,
    manifest_path: Path | str,
    supervision: SupervisionSpec,
    config: TrainConfig,
    out_dir: Path | str,
    weights: Optional[LossWeights] = None,
    pixel_config: Optional[PixelLossConfig] = None,
    run_name: str = "model",
) -> TrainResult:
    """Train against the train/val splits of a dataset manifest."""
    splits = load_manifest(manifest_path)
    train_set = [load_scene(p) for p in splits.get("train", [])]
    val_set = [load_scene(p) for p in splits.get("val", [])]
    return train_scenes(
        model, train_set, val_set, supervision, config, out_dir,
        weights=weights, pixel_config=pixel_config, run_name=run_name,
    )


def evaluate_scenes(
    model,
    scenes: Sequence[Scene],
    supervision: SupervisionSpec,
    k_samples: int,
    seed: int,
    split: str = "test",
    n_eval_seeds: int = 5,
) -> MetricReport:
    """Forward each scene under several sample draws and aggregate metrics.

    Per-layer squared errors are pooled over scenes and evaluation seeds
    (metrics are averaged in the MSE domain, then converted), SSIM is
    averaged arithmetically.
    """
    if not scenes:
        raise ValueError(f"split {split!r} is empty")
    supervision.validate_for(scenes[0].volume.n_layers)
    n_layers = scenes[0].volume.n_layers
    sq_sum = np.zeros(n_layers)
    sq_count = np.zeros(n_layers)
    ssim_values: list[list[float]] = [[] for _ in range(n_layers)]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for seed_offset in range(n_eval_seeds):
            for scene_idx, scene in enumerate(scenes):
                samples = sample_observations(
                    scene.volume, k_samples,
                    derive_seed(seed, "eval", seed_offset, scene_idx),
                )
                pred = model.predict(scene.height_map, samples)
                gt = np.asarray(scene.volume.data, dtype=np.float64)
                err = pred.data - gt
                sq_sum += (err * err).sum(axis=(1, 2))
                sq_count += err.shape[1] * err.shape[2]
                for layer in range(n_layers):
                    ssim_values[layer].append(ssim(pred.data[layer], gt[layer]))
    model.train(was_training)
    layer_mse = sq_sum / sq_count
    layer_ssim = np.array([np.mean(v) for v in ssim_values])
    return build_report(split, layer_mse, layer_ssim, supervision.layer_indices)


def evaluate(
    model_or_checkpoint,
    manifest_path: Path | str,
    split: str,
    supervision: SupervisionSpec,
    k_samples: int,
    seed: int,
    n_eval_seeds: int = 5,
) -> MetricReport:
    """Evaluate a model (object or checkpoint path) on a manifest split."""
    if isinstance(model_or_checkpoint, (str, Path)):
        model = load_model(model_or_checkpoint)
    else:
        model = model_or_checkpoint
    splits = load_manifest(manifest_path)
    if split not in splits or not splits[split]:
        raise ValueError(f"manifest has no scenes for split {split!r}")
    scenes = [load_scene(p) for p in splits[split]]
    return evaluate_scenes(
        model, scenes, supervision, k_samples, seed, split=split,
        n_eval_seeds=n_eval_seeds,
    )
