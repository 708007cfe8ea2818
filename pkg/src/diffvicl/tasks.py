"""Bidirectional codecs between task annotations and prompt-target images.

Every task's supervision must be expressed as an RGB image so it can ride
the prompt-target path; these codecs render annotations onto canvases and
decode predicted canvases back to annotations for scoring.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ImageRGB
from .errors import AnnotationError

TASKS = (
    "foreground_segmentation",
    "object_detection",
    "semantic_segmentation",
    "keypoint_detection",
    "edge_detection",
    "colorization",
)

GROUP_FACE = "face"
GROUP_BODY = "body"

# Gaussian spreads in pixels at the 512 canvas; finer for facial points so
# adjacent landmarks stay separable after the autoencoder round trip.
SIGMA_FACE = 4.0
SIGMA_BODY = 8.0
REFERENCE_CANVAS = 512

PEAK_THRESHOLD = 0.3
BINARY_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class BinaryMask:
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise AnnotationError(f"mask must be 2-d, got shape {m.shape}")
        object.__setattr__(self, "mask", m.astype(bool))

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels; half-open on both axes (x0 <= x < x1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise AnnotationError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if self.x0 < 0 or self.y0 < 0:
            raise AnnotationError(f"box extends past the origin: {(self.x0, self.y0)}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True, eq=False)
class ClassMap:
    ids: np.ndarray  # (H, W) int
    num_classes: int
    ignore_id: int = 255

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise AnnotationError(f"class map must be 2-d, got shape {ids.shape}")
        ids = ids.astype(np.int64)
        labeled = ids != self.ignore_id
        if labeled.any() and (ids[labeled].min() < 0 or ids[labeled].max() >= self.num_classes):
            raise AnnotationError(
                f"class ids outside [0, {self.num_classes}) present: "
                f"[{ids[labeled].min()}, {ids[labeled].max()}]"
            )
        object.__setattr__(self, "ids", ids)

    @property
    def shape(self):
        return self.ids.shape


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True
    group: str = GROUP_BODY

    def __post_init__(self):
        if self.group not in (GROUP_FACE, GROUP_BODY):
            raise AnnotationError(f"unknown keypoint group {self.group!r}")


@dataclass(frozen=True)
class KeypointSet:
    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))

    def visible(self) -> list[Keypoint]:
        return [p for p in self.points if p.visible]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class EdgeMap:
    values: np.ndarray  # (H, W) float in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise AnnotationError(f"edge map must be 2-d, got shape {v.shape}")
        object.__setattr__(self, "values", np.clip(v, 0.0, 1.0))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Palette:
    """K pairwise-distinct class colors plus a background color."""

    colors: tuple  # K rows of (r, g, b) floats in [0, 1]
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(set(self.colors)) != len(self.colors):
            raise AnnotationError("palette colors must be pairwise distinct")

    def array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float32)


def make_palette(K: int) -> Palette:
    """Equally spaced hues at full saturation and value; background black."""
    if K < 1:
        raise AnnotationError(f"palette needs K >= 1, got {K}")
    colors = tuple(colorsys.hsv_to_rgb(i / K, 1.0, 1.0) for i in range(K))
    return Palette(colors=colors)


def _sigma(group: str, canvas: int) -> float:
    base = SIGMA_FACE if group == GROUP_FACE else SIGMA_BODY
    return base * canvas / REFERENCE_CANVAS


def _render_gaussians(points, hw, group: str) -> np.ndarray:
    h, w = hw
    out = np.zeros((h, w), dtype=np.float32)
    sigma = _sigma(group, min(h, w))
    reach = int(np.ceil(4 * sigma))
    ys = np.arange(h, dtype=np.float32)
    xs = np.arange(w, dtype=np.float32)
    for p in points:
        x0, x1 = max(0, int(p.x) - reach), min(w, int(p.x) + reach + 1)
        y0, y1 = max(0, int(p.y) - reach), min(h, int(p.y) + reach + 1)
        dx = xs[x0:x1] - np.float32(p.x)
        dy = ys[y0:y1] - np.float32(p.y)
        g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / np.float32(2 * sigma * sigma))
        out[y0:y1, x0:x1] += g
    return np.clip(out, 0.0, 1.0)


def encode_target(task: str, ann, image_hw: tuple[int, int] | None = None) -> ImageRGB:
    """Render a task annotation as the RGB image the prompt-target path carries."""
    if task == "foreground_segmentation":
        px = np.repeat(ann.mask[:, :, None].astype(np.float32), 3, axis=2)
        return ImageRGB(px)

    if task == "object_detection":
        if image_hw is None:
            raise AnnotationError("box rendering needs image_hw")
        h, w = image_hw
        if ann.x1 > w or ann.y1 > h:
            raise AnnotationError(f"box {ann} exceeds canvas {h}x{w}")
        px = np.zeros((h, w, 3), dtype=np.float32)
        px[int(round(ann.y0)) : int(round(ann.y1)), int(round(ann.x0)) : int(round(ann.x1))] = 1.0
        return ImageRGB(px)

    if task == "semantic_segmentation":
        palette = make_palette(ann.num_classes)
        colors = palette.array()
        h, w = ann.shape
        px = np.empty((h, w, 3), dtype=np.float32)
        px[:] = np.asarray(palette.background, dtype=np.float32)
        labeled = ann.ids != ann.ignore_id
        px[labeled] = colors[ann.ids[labeled]]
        return ImageRGB(px)

    if task == "keypoint_detection":
        if image_hw is None:
            raise AnnotationError("keypoint rendering needs image_hw")
        h, w = image_hw
        for p in ann.visible():
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise AnnotationError(f"keypoint ({p.x}, {p.y}) outside canvas {h}x{w}")
        px = np.zeros((h, w, 3), dtype=np.float32)
        px[:, :, 0] = _render_gaussians([p for p in ann.visible() if p.group == GROUP_FACE], (h, w), GROUP_FACE)
        px[:, :, 1] = _render_gaussians([p for p in ann.visible() if p.group == GROUP_BODY], (h, w), GROUP_BODY)
        return ImageRGB(px)

    if task == "edge_detection":
        return ImageRGB(np.repeat(ann.values[:, :, None], 3, axis=2))

    if task == "colorization":
        return ann  # the color image itself; the query carries the grayscale

    raise AnnotationError(f"unknown task {task!r}")


def _luminance(img: ImageRGB) -> np.ndarray:
    return img.pixels.mean(axis=2)


def _largest_component(binary: np.ndarray) -> np.ndarray | None:
    labels, count = ndimage.label(binary)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _find_peaks(channel: np.ndarray, threshold: float, min_distance: int):
    size = 2 * min_distance + 1
    is_max = channel == ndimage.maximum_filter(channel, size=size, mode="constant")
    ys, xs = np.nonzero(is_max & (channel >= threshold))
    order = np.argsort(-channel[ys, xs], kind="stable")
    kept: list[tuple[int, int]] = []
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if all((x - kx) ** 2 + (y - ky) ** 2 > min_distance**2 for kx, ky in kept):
            kept.append((x, y))
    return kept


def decode_prediction(task: str, img: ImageRGB, num_classes: int | None = None, peak_threshold: float = PEAK_THRESHOLD):
    """Decode a predicted canvas back to a task annotation.

    Detection returns None when nothing crosses the threshold (scored as
    zero overlap downstream, not an error).
    """
    if task == "foreground_segmentation":
        return BinaryMask(_luminance(img) >= BINARY_THRESHOLD)

    if task == "object_detection":
        component = _largest_component(_luminance(img) >= BINARY_THRESHOLD)
        if component is None:
            return None
        ys, xs = np.nonzero(component)
        return BBox(x0=float(xs.min()), y0=float(ys.min()), x1=float(xs.max() + 1), y1=float(ys.max() + 1))

    if task == "semantic_segmentation":
        if num_classes is None:
            raise AnnotationError("semantic decoding needs num_classes")
        colors = make_palette(num_classes).array()
        diff = img.pixels[:, :, None, :] - colors[None, None, :, :]
        ids = np.argmin(np.sum(diff * diff, axis=3), axis=2)
        return ClassMap(ids=ids, num_classes=num_classes)

    if task == "keypoint_detection":
        h, w = img.pixels.shape[:2]
        points = []
        for channel, group in ((0, GROUP_FACE), (1, GROUP_BODY)):
            min_distance = max(1, int(round(_sigma(group, min(h, w)))))
            for x, y in _find_peaks(img.pixels[:, :, channel], peak_threshold, min_distance):
                points.append(Keypoint(x=float(x), y=float(y), visible=True, group=group))
        return KeypointSet(points=tuple(points))

    if task == "edge_detection":
        # luminance with the green channel excluded, so keypoint-style green
        # bleed cannot masquerade as edges
        return EdgeMap((img.pixels[:, :, 0] + img.pixels[:, :, 2]) / 2.0)

    if task == "colorization":
        return img

    raise AnnotationError(f"unknown task {task!r}")


def match_keypoints(pred: KeypointSet, gt: KeypointSet):
    """Mutual-nearest-neighbor matching within each group.

    The heatmap encodes group but not identity, so scoring pairs each
    visible groundtruth point with a detected peak only when each is the
    other's nearest neighbor. Returns (pred_index, gt_index) pairs over the
    original tuple indices.
    """
    matches = []
    for group in (GROUP_FACE, GROUP_BODY):
        p_idx = [i for i, p in enumerate(pred.points) if p.group == group]
        g_idx = [i for i, p in enumerate(gt.points) if p.group == group and p.visible]
        if not p_idx or not g_idx:
            continue
        p_xy = np.array([[pred.points[i].x, pred.points[i].y] for i in p_idx])
        g_xy = np.array([[gt.points[i].x, gt.points[i].y] for i in g_idx])
        d = np.linalg.norm(p_xy[:, None, :] - g_xy[None, :, :], axis=2)
        nearest_g = np.argmin(d, axis=1)
        nearest_p = np.argmin(d, axis=0)
        for pi in range(len(p_idx)):
            gi = nearest_g[pi]
            if nearest_p[gi] == pi:
                matches.append((p_idx[pi], g_idx[gi]))
    return matches


# ---------------------------------------------------------------------------
# annotation files: masks and class maps as indexed rasters, boxes and
# keypoints as structured text records


def save_mask(mask: BinaryMask, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.mask * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> BinaryMask:
    with Image.open(path) as im:
        return BinaryMask(np.asarray(im.convert("L")) >= 128)


def save_class_map(cm: ClassMap, path) -> None:
    if cm.ids.max(initial=0) > 255:
        raise AnnotationError("indexed raster supports ids up to 255")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(cm.ids.astype(np.uint8), mode="L").save(path)


def load_class_map(path, num_classes: int, ignore_id: int = 255) -> ClassMap:
    with Image.open(path) as im:
        return ClassMap(np.asarray(im.convert("L")), num_classes=num_classes, ignore_id=ignore_id)


def save_bbox(box: BBox, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"x0": box.x0, "y0": box.y0, "x1": box.x1, "y1": box.y1}) + "\n")


def load_bbox(path) -> BBox:
    d = json.loads(Path(path).read_text())
    return BBox(x0=d["x0"], y0=d["y0"], x1=d["x1"], y1=d["y1"])


def save_keypoints(ks: KeypointSet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows = [{"x": p.x, "y": p.y, "visible": p.visible, "group": p.group} for p in ks.points]
    Path(path).write_text("\n".join(json.dumps(r) for r in rows) + ("\n" if rows else ""))


def load_keypoints(path) -> KeypointSet:
    points = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        points.append(Keypoint(x=d["x"], y=d["y"], visible=d["visible"], group=d["group"]))
    return KeypointSet(points=tuple(points))
