"""Command-line pipelines: gen, train, eval, ablate, render.

Every run is reproducible from a single JSON config file whose sections
mirror the typed configs (``scene``, ``encoder``, ``train``, ``weights``,
``pixel``, ``supervision``); command-line flags override config fields.
Exit codes: 0 success, 1 runtime error, 2 config/usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model
from .encoder import EncoderConfig
from .fusion import build_model
from .grids import SupervisionSpec, sample_observations
from .losses import LossWeights, PixelLossConfig, RenderParams, render_heights
from .pgm import write_pgm
from .rm3d import load_scene
from .scene import SceneConfig, generate_dataset, load_manifest, worker_count
from .training import TrainConfig, evaluate, train
from . import ablation

DEFAULT_SAMPLING_COUNTS = (5, 10, 25, 50, 100, 200, 500)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    config = json.loads(Path(path).read_text())
    if not isinstance(config, dict):
        raise ValueError(f"{path}: config root must be a JSON object")
    return config


def _build_dataclass(cls, section: dict, overrides: dict):
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _parse_indices(raw: str | None) -> tuple[int, ...] | None:
    if raw is None:
        return None
    return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)


def _supervision(config: dict, args) -> SupervisionSpec:
    section = dict(config.get("supervision", {}))
    indices = _parse_indices(getattr(args, "supervised", None))
    if indices is not None:
        section["layer_indices"] = list(indices)
    if "layer_indices" not in section:
        raise ValueError("supervised layer indices are required (--supervised)")
    return SupervisionSpec(
        layer_indices=tuple(section["layer_indices"]),
        pseudo_label_weight=section.get("pseudo_label_weight", 0.3),
    )


def _default_supervision(n_layers: int) -> tuple[int, ...]:
    return (0, (n_layers - 1) // 2, n_layers - 1)


def _cmd_gen(args) -> int:
    config = _load_config(args.config)
    template = _build_dataclass(
        SceneConfig,
        config.get("scene", {}),
        {
            "width": args.width,
            "height": args.height,
            "n_layers": args.layers,
            "seed": args.seed,
        },
    )
    manifest = generate_dataset(template, args.count, template.seed, args.out)
    print(f"wrote {args.count} scenes; manifest at {manifest}")
    return 0


def _grid_from_manifest(manifest_path: str):
    splits = load_manifest(manifest_path)
    scenes = splits.get("train") or next(iter(splits.values()))
    scene = load_scene(scenes[0])
    return scene.volume.height, scene.volume.width, scene.volume.altitudes


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    train_config = _build_dataclass(
        TrainConfig,
        config.get("train", {}),
        {
            "epochs": args.epochs,
            "seed": args.seed,
            "objective": args.objective,
            "samples_per_scene": args.samples,
            "batch_size": args.batch_size,
        },
    )
    height, width, altitudes = _grid_from_manifest(args.manifest)
    section = dict(config.get("supervision", {}))
    if args.supervised is None and "layer_indices" not in section:
        section["layer_indices"] = list(_default_supervision(len(altitudes)))
        config = dict(config)
        config["supervision"] = section
    supervision = _supervision(config, args)
    weights = _build_dataclass(LossWeights, config.get("weights", {}), {})
    pixel = _build_dataclass(PixelLossConfig, config.get("pixel", {}), {})
    encoder = _build_dataclass(EncoderConfig, config.get("encoder", {}), {})

    model = build_model(height, width, altitudes, encoder, seed=train_config.seed)
    result = train(
        model, args.manifest, supervision, train_config, args.out,
        weights=weights, pixel_config=pixel, run_name=args.run_name,
    )
    print(
        f"checkpoint: {result.checkpoint_path}\nlog: {result.log_path}\n"
        f"best val rmse: {result.best_val_rmse:.6f}"
    )
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    height, width, altitudes = _grid_from_manifest(args.manifest)
    section = dict(config.get("supervision", {}))
    if args.supervised is None and "layer_indices" not in section:
        section["layer_indices"] = list(_default_supervision(len(altitudes)))
        config = dict(config)
        config["supervision"] = section
    supervision = _supervision(config, args)
    report = evaluate(
        args.checkpoint, args.manifest, args.split, supervision,
        args.samples, args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"metrics_{args.split}.csv"
    report.write_csv(out_path)
    print(f"overall rmse: {report.overall.rmse:.6f}")
    if report.labeled:
        print(f"labeled rmse: {report.labeled.rmse:.6f}")
    if report.unlabeled:
        print(f"unlabeled rmse: {report.unlabeled.rmse:.6f}")
    print(f"metrics: {out_path}")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_config(args.config)
    train_config = _build_dataclass(
        TrainConfig,
        config.get("train", {}),
        {"epochs": args.epochs, "seed": args.seed, "samples_per_scene": args.samples},
    )
    height, width, altitudes = _grid_from_manifest(args.manifest)
    encoder = _build_dataclass(EncoderConfig, config.get("encoder", {}), {})

    def factory(seed: int):
        return build_model(height, width, altitudes, encoder, seed=seed)

    n = len(altitudes)
    mid = (n - 1) // 2
    if args.axis == "altitude":
        strategies = [
            (0,), (mid,), (n - 1,),
            (0, n - 1), (mid, mid + 1),
            (0, mid, n - 1), (mid - 1, mid, mid + 1),
            tuple(int(i) for i in np.round(np.linspace(0, n - 1, 5))),
        ]
        rows = ablation.ablate_altitudes(
            args.manifest, strategies, train_config, factory, args.out,
        )
    elif args.axis == "sampling":
        supervision = _supervision(
            {"supervision": {"layer_indices": list(_default_supervision(n))}}, args
        ) if args.supervised is None else _supervision(config, args)
        counts = [c for c in DEFAULT_SAMPLING_COUNTS if c <= height * width * n]
        rows = ablation.ablate_sampling(
            args.manifest, counts, train_config, supervision, factory, args.out,
        )
    else:
        supervision = _supervision(
            {"supervision": {"layer_indices": list(_default_supervision(n))}}, args
        ) if args.supervised is None else _supervision(config, args)
        rows = ablation.ablate_losses(
            args.manifest, train_config, supervision, factory, args.out,
        )
    for row in rows:
        print(row)
    return 0


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        model = load_model(args.checkpoint)
        samples = sample_observations(scene.volume, args.samples, args.seed)
        volume = model.predict(scene.height_map, samples)
        params = RenderParams.for_altitudes(
            volume.altitudes,
            k_gain=model.render_k.item(),
            t_threshold=model.render_t.item(),
        )
    else:
        volume = scene.volume
        params = RenderParams.for_altitudes(volume.altitudes)

    for layer in range(volume.n_layers):
        write_pgm(out_dir / f"layer_{layer:02d}.pgm", volume.data[layer])
    rendered = render_heights(
        torch.as_tensor(np.asarray(volume.data, dtype=np.float64)),
        volume.altitudes,
        params,
    ).numpy()
    max_height = volume.max_altitude
    write_pgm(out_dir / "rendered_height.pgm", np.clip(rendered / max_height, 0, 1))
    write_pgm(
        out_dir / "height_gt.pgm",
        np.clip(scene.height_map.heights / max_height, 0, 1),
    )
    print(f"wrote {volume.n_layers} layer heatmaps and height maps to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radiofield3d",
        description="Weakly supervised 3D radio map estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic scene dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--width", type=int, default=None)
    gen.add_argument("--height", type=int, default=None)
    gen.add_argument("--layers", type=int, default=None)
    gen.add_argument("--config", default=None)
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="train a model against a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--objective", choices=("jsil", "mse-weak", "mse-full"), default=None)
    tr.add_argument("--supervised", default=None, help="comma-separated layer indices")
    tr.add_argument("--samples", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--run-name", default="model")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--config", default=None)
    ev.add_argument("--supervised", default=None)
    ev.add_argument("--samples", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="run an ablation axis")
    ab.add_argument("--axis", choices=("altitude", "sampling", "loss"), required=True)
    ab.add_argument("--manifest", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config", default=None)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--epochs", type=int, default=None)
    ab.add_argument("--samples", type=int, default=None)
    ab.add_argument("--supervised", default=None)
    ab.set_defaults(func=_cmd_ablate)

    rn = sub.add_parser("render", help="export PGM heatmaps for a stored scene")
    rn.add_argument("--scene", required=True)
    rn.add_argument("--out", required=True)
    rn.add_argument("--checkpoint", default=None)
    rn.add_argument("--samples", type=int, default=50)
    rn.add_argument("--seed", type=int, default=0)
    rn.set_defaults(func=_cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(worker_count())
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
