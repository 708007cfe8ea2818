"""Dense-prediction metrics: overlap, segmentation, keypoint, and perceptual.

Mask overlap is symmetric; the segmentation and keypoint scores are
directional (prediction scored against groundtruth). Perceptual scores need
a pluggable feature backend and are skipped with an explicit marker when
none is available, never silently zeroed.
"""

from __future__ import annotations

from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import linalg

from ..core import ImageRGB
from ..errors import DimensionError
from ..tasks import BBox, BinaryMask, ClassMap, KeypointSet, match_keypoints


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Intersection over union of two masks; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred.mask, gt.mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred.mask, gt.mask).sum() / union)


def box_iou(a: BBox | None, b: BBox) -> float:
    """Overlap of two boxes in area terms; a missing prediction scores 0."""
    if a is None:
        return 0.0
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def confusion_matrix(pred_ids: np.ndarray, gt_ids: np.ndarray, num_classes: int, ignore_id: int = 255) -> np.ndarray:
    """K x K counts indexed [gt, pred], skipping ignored groundtruth pixels."""
    if pred_ids.shape != gt_ids.shape:
        raise DimensionError(f"shapes differ: {pred_ids.shape} vs {gt_ids.shape}")
    keep = gt_ids != ignore_id
    flat = num_classes * gt_ids[keep].astype(np.int64) + pred_ids[keep].astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def semseg_scores(pred: ClassMap, gt: ClassMap) -> tuple[float, float]:
    """(mIoU over classes present in gt, pixel accuracy over labeled pixels)."""
    if pred.shape != gt.shape:
        raise DimensionError(f"shapes differ: {pred.shape} vs {gt.shape}")
    K = gt.num_classes
    cm = confusion_matrix(pred.ids, gt.ids, K, ignore_id=gt.ignore_id)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    present = gt_count > 0
    union = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / union, 0.0)
    miou = float(per_class[present].mean()) if present.any() else 0.0
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total > 0 else 0.0
    return miou, accuracy


def keypoint_scores(
    pred: KeypointSet,
    gt: KeypointSet,
    image_hw: tuple[int, int],
    norm_len: float | None = None,
    pck_frac: float = 0.1,
):
    """(mean squared pixel distance, fraction of correct keypoints).

    Matching is the tasks module's mutual-nearest-neighbor pairing; each
    unmatched visible groundtruth point is charged the image diagonal as its
    distance. A point counts as correct when its match lies within
    ``pck_frac * norm_len`` (inclusive); ``norm_len`` defaults to the longer
    image side. Returns None when the groundtruth has no visible points
    (undefined score, excluded from aggregates).
    """
    visible_gt = [i for i, p in enumerate(gt.points) if p.visible]
    if not visible_gt:
        return None
    h, w = image_hw
    if norm_len is None:
        norm_len = float(max(h, w))
    diagonal = float(np.hypot(h, w))
    matches = {gi: pi for pi, gi in match_keypoints(pred, gt)}
    radius = pck_frac * norm_len
    sq_dists = []
    correct = 0
    for gi in visible_gt:
        if gi in matches:
            p = pred.points[matches[gi]]
            g = gt.points[gi]
            dist = float(np.hypot(p.x - g.x, p.y - g.y))
        else:
            dist = diagonal
        sq_dists.append(dist * dist)
        if dist <= radius:
            correct += 1
    mse = float(np.mean(sq_dists))
    pck = correct / len(visible_gt)
    return mse, pck


def pixel_mse(pred: ImageRGB, gt: ImageRGB) -> float:
    """Mean squared difference over all pixels and channels, in [0, 1] scale."""
    if pred.pixels.shape != gt.pixels.shape:
        raise DimensionError(f"shapes differ: {pred.pixels.shape} vs {gt.pixels.shape}")
    diff = pred.pixels.astype(np.float64) - gt.pixels.astype(np.float64)
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# perceptual scores over a pluggable feature backend


@runtime_checkable
class PerceptualBackend(Protocol):
    """Feature extractor for distribution and pairwise perceptual scores."""

    backend_id: str

    def features(self, images: Sequence[ImageRGB]) -> np.ndarray: ...

    def pair_distance(self, a: ImageRGB, b: ImageRGB) -> float: ...


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Frechet distance between two Gaussians (mu, cov)."""
    diff = mu1 - mu2
    covmean = linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))


def fid_from_features(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between the feature Gaussians of two image sets."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise DimensionError(f"feature shapes incompatible: {feats_a.shape} vs {feats_b.shape}")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    return frechet_distance(mu_a, np.atleast_2d(cov_a), mu_b, np.atleast_2d(cov_b))


def perceptual_scores(pred_set: Sequence[ImageRGB], ref_set: Sequence[ImageRGB], backend: PerceptualBackend | None):
    """Mean pairwise perceptual distance and set-level Frechet score.

    Pairs are aligned by position, so the sets must have equal length for
    the pairwise mean. Without a backend both scores come back as None with
    a skip marker naming the reason.
    """
    if len(pred_set) == 0 or len(ref_set) == 0:
        raise ValueError("perceptual scoring needs non-empty image sets")
    if backend is None:
        return {"lpips_mean": None, "fid": None, "skipped": "no perceptual backend configured"}
    if len(pred_set) != len(ref_set):
        raise DimensionError(f"aligned pairs required: {len(pred_set)} vs {len(ref_set)} images")
    distances = [backend.pair_distance(a, b) for a, b in zip(pred_set, ref_set)]
    fid = fid_from_features(backend.features(pred_set), backend.features(ref_set))
    return {
        "lpips_mean": float(np.mean(distances)),
        "fid": fid,
        "backend": backend.backend_id,
        "set_sizes": (len(pred_set), len(ref_set)),
    }
