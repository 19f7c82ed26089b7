"""Ablation harnesses: supervision altitudes, sampling density, loss terms.

Each harness trains one fresh model per configuration (all runs share the
base seed so initializations match), evaluates on the test split, and emits
a comparison CSV.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .grids import SupervisionSpec
from .losses import LossWeights
from .metrics import MetricReport
from .training import TrainConfig, evaluate, train

ModelFactory = Callable[[int], object]

LOSS_VARIANTS = ("lv", "lv+lp", "lv+lr", "full", "mse-weak", "mse-full")


def _metric_row(report: MetricReport) -> dict:
    unlabeled = report.unlabeled
    labeled = report.labeled
    return {
        "rmse": report.overall.rmse,
        "psnr": report.overall.psnr,
        "ssim": report.overall.ssim,
        "labeled_rmse": labeled.rmse if labeled else "",
        "unlabeled_rmse": unlabeled.rmse if unlabeled else "",
    }


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(fieldnames))
        writer.writeheader()
        writer.writerows(rows)


def ablate_altitudes(
    manifest_path: Path | str,
    strategies: Sequence[Sequence[int]],
    base_config: TrainConfig,
    model_factory: ModelFactory,
    out_dir: Path | str,
    eval_seed: int = 0,
) -> list[dict]:
    """Train one model per supervised-layer strategy and compare metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for strategy in strategies:
        supervision = SupervisionSpec(layer_indices=tuple(sorted(strategy)))
        name = "alt_" + "-".join(str(i) for i in supervision.layer_indices)
        model = model_factory(base_config.seed)
        train(model, manifest_path, supervision, base_config, out_dir, run_name=name)
        report = evaluate(
            model, manifest_path, "test", supervision,
            base_config.samples_per_scene, eval_seed,
        )
        row = {
            "strategy": " ".join(str(i) for i in supervision.layer_indices),
            "n_s": len(supervision.layer_indices),
        }
        row.update(_metric_row(report))
        rows.append(row)
    _write_csv(
        out_dir / "altitude_ablation.csv",
        ["strategy", "n_s", "rmse", "psnr", "ssim", "labeled_rmse", "unlabeled_rmse"],
        rows,
    )
    return rows


def ablate_sampling(
    manifest_path: Path | str,
    counts: Sequence[int],
    base_config: TrainConfig,
    supervision: SupervisionSpec,
    model_factory: ModelFactory,
    out_dir: Path | str,
    eval_seed: int = 0,
) -> list[dict]:
    """Train and evaluate once per observation count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for count in counts:
        config = replace(base_config, samples_per_scene=int(count))
        model = model_factory(config.seed)
        train(model, manifest_path, supervision, config, out_dir, run_name=f"k{count}")
        report = evaluate(model, manifest_path, "test", supervision, int(count), eval_seed)
        row = {"k": int(count)}
        row.update(_metric_row(report))
        rows.append(row)
    _write_csv(
        out_dir / "sampling_ablation.csv",
        ["k", "rmse", "psnr", "ssim", "labeled_rmse", "unlabeled_rmse"],
        rows,
    )
    return rows


def _variant_settings(name: str, base: LossWeights) -> tuple[str, LossWeights]:
    if name == "lv":
        return "jsil", replace(base, lambda_r=0.0, lambda_p=0.0)
    if name == "lv+lp":
        return "jsil", replace(base, lambda_r=0.0)
    if name == "lv+lr":
        return "jsil", replace(base, lambda_p=0.0)
    if name == "full":
        return "jsil", base
    if name in ("mse-weak", "mse-full"):
        return name, base
    raise ValueError(f"unknown loss variant {name!r}")


def ablate_losses(
    manifest_path: Path | str,
    base_config: TrainConfig,
    supervision: SupervisionSpec,
    model_factory: ModelFactory,
    out_dir: Path | str,
    variants: Sequence[str] = LOSS_VARIANTS,
    eval_seed: int = 0,
) -> list[dict]:
    """Toggle objective terms and compare reconstruction quality."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_weights = LossWeights(lambda_pl=supervision.pseudo_label_weight)
    rows = []
    for name in variants:
        objective, weights = _variant_settings(name, base_weights)
        config = replace(base_config, objective=objective)
        model = model_factory(config.seed)
        run_name = "loss_" + name.replace("+", "_")
        train(
            model, manifest_path, supervision, config, out_dir,
            weights=weights, run_name=run_name,
        )
        report = evaluate(
            model, manifest_path, "test", supervision,
            config.samples_per_scene, eval_seed,
        )
        row = {"config": name}
        row.update(_metric_row(report))
        rows.append(row)
    _write_csv(
        out_dir / "loss_ablation.csv",
        ["config", "rmse", "psnr", "ssim", "labeled_rmse", "unlabeled_rmse"],
        rows,
    )
    return rows
