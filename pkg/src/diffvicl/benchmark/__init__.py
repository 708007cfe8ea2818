"""Dataset adapters, metrics, and the benchmark/ablation runner."""

from .datasets import EpisodeSpec, build_episodes, make_adapter
from .metrics import (
    box_iou,
    fid_from_features,
    iou,
    keypoint_scores,
    perceptual_scores,
    pixel_mse,
    semseg_scores,
)
from .runner import MetricReport, run_ablation, run_benchmark

__all__ = [
    "EpisodeSpec",
    "MetricReport",
    "box_iou",
    "build_episodes",
    "fid_from_features",
    "iou",
    "keypoint_scores",
    "make_adapter",
    "perceptual_scores",
    "pixel_mse",
    "run_ablation",
    "run_benchmark",
    "semseg_scores",
]
