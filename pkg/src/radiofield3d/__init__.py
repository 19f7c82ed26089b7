"""Weakly supervised 3D radio map estimation toolkit."""

from .grids import (
    BuildingHeightMap,
    RadioVolume,
    SampleObservation,
    SampleSet,
    SupervisionSpec,
    build_pseudo_volume,
    sample_observations,
)
from .rm3d import Scene, VolumeFormatError, load_scene, save_scene
from .scene import SceneConfig, generate_dataset, generate_scene, obstructed_length
from .encoder import EncoderConfig, MapEncoder, PointEncoder, fourier_encode
from .fusion import CrossAttentionFuser, DecoderConfig, RadioFieldNet, build_model
from .losses import (
    LossReport,
    LossWeights,
    PixelLossConfig,
    RenderParams,
    huber,
    js_divergence,
    linear_volume_loss,
    mse_loss,
    pixel_loss,
    radio_rendering_loss,
    render_heights,
    soft_histogram,
    total_loss,
)
from .metrics import MetricReport, psnr, rmse, ssim
from .training import TrainConfig, TrainingDivergedError, evaluate, train
from .checkpoint import load_model, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BuildingHeightMap",
    "CrossAttentionFuser",
    "DecoderConfig",
    "EncoderConfig",
    "LossReport",
    "LossWeights",
    "MapEncoder",
    "MetricReport",
    "PixelLossConfig",
    "PointEncoder",
    "RadioFieldNet",
    "RadioVolume",
    "RenderParams",
    "SampleObservation",
    "SampleSet",
    "Scene",
    "SceneConfig",
    "SupervisionSpec",
    "TrainConfig",
    "TrainingDivergedError",
    "VolumeFormatError",
    "build_model",
    "build_pseudo_volume",
    "evaluate",
    "fourier_encode",
    "generate_dataset",
    "generate_scene",
    "huber",
    "js_divergence",
    "linear_volume_loss",
    "load_model",
    "load_scene",
    "mse_loss",
    "obstructed_length",
    "pixel_loss",
    "psnr",
    "radio_rendering_loss",
    "render_heights",
    "rmse",
    "sample_observations",
    "save_checkpoint",
    "save_scene",
    "soft_histogram",
    "ssim",
    "total_loss",
    "train",
]
