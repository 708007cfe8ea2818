"""Dataset adapters and deterministic episode construction.

Adapters expose a uniform surface: query ids with groundtruth, per-query
candidate prompt pools, and prompt image/target pairs rendered through the
task codecs. Episode lists are reproducible from (seed, pool, retrieval
settings) alone; a seeded subsample flag scales any benchmark down to desk
size.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import retrieval as retrieval_mod
from ..core import ImageRGB, VICLConfig, grayscale, load_image, preprocess_image, preprocess_labels, preprocess_points
from ..errors import IngestionError
from ..tasks import (
    GROUP_BODY,
    BBox,
    BinaryMask,
    ClassMap,
    EdgeMap,
    Keypoint,
    KeypointSet,
    encode_target,
)

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

# gtFine labelIds to the 19 evaluation classes; everything else is void
CITYSCAPES_LABEL_TO_TRAIN = {
    7: 0, 8: 1, 11: 2, 12: 3, 13: 4, 17: 5, 19: 6, 20: 7, 21: 8, 22: 9,
    23: 10, 24: 11, 25: 12, 26: 13, 27: 14, 28: 15, 31: 16, 32: 17, 33: 18,
}
CITYSCAPES_NUM_CLASSES = 19
IGNORE_ID = 255


@dataclass(frozen=True)
class EpisodeSpec:
    """One benchmark work item; reproducible from its fields alone."""

    dataset_id: str
    split_id: str
    query_id: str
    prompt_ids: tuple
    task: str
    config: VICLConfig

    def content_key(self) -> str:
        payload = json.dumps(
            {
                "dataset": self.dataset_id,
                "split": self.split_id,
                "query": self.query_id,
                "prompts": list(self.prompt_ids),
                "task": self.task,
                "config": dataclasses.asdict(self.config),
            },
            sort_keys=True,
        )
        import hashlib

        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise IngestionError(path, f"{what} directory not found")
    return path


def _read_ids(path: Path) -> list[str]:
    if not path.is_file():
        raise IngestionError(path, "split index file not found")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


class Pascal5iAdapter:
    """Pascal-5i foreground segmentation and single object detection.

    Expects a VOC2012-style root: JPEGImages/, SegmentationClass/,
    SegmentationObject/ (detection only), ImageSets/Segmentation/train.txt
    and val.txt. Split s covers the five classes 5s+1 .. 5s+5; one episode
    per (validation image, split class present in it). Prompt pools are the
    training images containing the episode's class.
    """

    def __init__(self, root, split_id: int, task: str = "foreground_segmentation", image_size: int = 512):
        if task not in ("foreground_segmentation", "object_detection"):
            raise IngestionError(root, f"pascal5i does not serve task {task!r}")
        if not 0 <= split_id <= 3:
            raise IngestionError(root, f"pascal5i split must be 0..3, got {split_id}")
        self.root = _require_dir(Path(root), "dataset root")
        self.task = task
        self.split_id = split_id
        self.image_size = image_size
        self.dataset_id = "pascal5i"
        self._images = _require_dir(self.root / "JPEGImages", "JPEGImages")
        self._seg = _require_dir(self.root / "SegmentationClass", "SegmentationClass")
        self._obj = self.root / "SegmentationObject"
        if task == "object_detection":
            _require_dir(self._obj, "SegmentationObject")
        sets = self.root / "ImageSets" / "Segmentation"
        self.classes = tuple(range(5 * split_id + 1, 5 * split_id + 6))
        self._val_pairs = self._index(_read_ids(sets / "val.txt"))
        self._train_pairs = self._index(_read_ids(sets / "train.txt"))

    def _class_ids_in(self, name: str) -> set[int]:
        with Image.open(self._seg / f"{name}.png") as im:
            ids = np.unique(np.asarray(im))
        return {int(i) for i in ids if 1 <= i <= 20}

    def _index(self, names: list[str]) -> list[tuple[str, int]]:
        pairs = []
        for name in names:
            present = self._class_ids_in(name) & set(self.classes)
            for cls in sorted(present):
                if self.task == "object_detection" and self._single_instance_mask(name, cls) is None:
                    continue
                pairs.append((name, cls))
        return pairs

    def _single_instance_mask(self, name: str, cls: int) -> np.ndarray | None:
        """Instance mask when the image holds exactly one instance of cls."""
        with Image.open(self._obj / f"{name}.png") as im:
            inst = np.asarray(im)
        with Image.open(self._seg / f"{name}.png") as im:
            seg = np.asarray(im)
        hits = []
        for inst_id in np.unique(inst):
            if inst_id in (0, 255):
                continue
            sel = inst == inst_id
            labels, counts = np.unique(seg[sel], return_counts=True)
            if labels[np.argmax(counts)] == cls:
                hits.append(sel)
        if len(hits) != 1:
            return None
        return hits[0]

    @staticmethod
    def _pair_id(name: str, cls: int) -> str:
        return f"{name}#{cls}"

    @staticmethod
    def _parse_id(pair_id: str) -> tuple[str, int]:
        name, cls = pair_id.rsplit("#", 1)
        return name, int(cls)

    def query_ids(self) -> list[str]:
        return sorted(self._pair_id(n, c) for n, c in self._val_pairs)

    def pool_ids(self, query_id: str) -> list[str]:
        _, cls = self._parse_id(query_id)
        return sorted(self._pair_id(n, c) for n, c in self._train_pairs if c == cls)

    def _image(self, name: str) -> ImageRGB:
        return load_image(self._images / f"{name}.jpg", size=self.image_size)

    def _annotation(self, pair_id: str):
        name, cls = self._parse_id(pair_id)
        with Image.open(self._seg / f"{name}.png") as im:
            seg = preprocess_labels(np.asarray(im), self.image_size)
        if self.task == "foreground_segmentation":
            return BinaryMask(seg == cls)
        inst = self._single_instance_mask(name, cls)
        if inst is None:
            raise IngestionError(self._obj / f"{name}.png", f"no single instance of class {cls}")
        inst = preprocess_labels(inst.astype(np.int32), self.image_size).astype(bool)
        ys, xs = np.nonzero(inst)
        if len(ys) == 0:
            raise IngestionError(self._obj / f"{name}.png", "instance cropped out by preprocessing")
        return BBox(x0=float(xs.min()), y0=float(ys.min()), x1=float(xs.max() + 1), y1=float(ys.max() + 1))

    def load_query(self, query_id: str):
        name, _ = self._parse_id(query_id)
        return self._image(name), self._annotation(query_id)

    def load_prompt(self, pair_id: str):
        name, _ = self._parse_id(pair_id)
        ann = self._annotation(pair_id)
        hw = (self.image_size, self.image_size)
        return self._image(name), encode_target(self.task, ann, image_hw=hw)

    def load_pool_image(self, pair_id: str) -> ImageRGB:
        name, _ = self._parse_id(pair_id)
        return self._image(name)

    @property
    def num_classes(self):
        return None


class CityscapesAdapter:
    """Cityscapes semantic segmentation over the 19 evaluation classes.

    Expects leftImg8bit/{split}/{city}/*_leftImg8bit.png paired with
    gtFine/{split}/{city}/*_gtFine_labelIds.png. Queries come from the
    evaluation split, prompt pools from the training split; void labels map
    to the ignore id and are excluded at scoring only.
    """

    def __init__(self, root, eval_split: str = "val", image_size: int = 512):
        self.root = _require_dir(Path(root), "dataset root")
        self.task = "semantic_segmentation"
        self.split_id = eval_split
        self.image_size = image_size
        self.dataset_id = "cityscapes"
        self._img_root = _require_dir(self.root / "leftImg8bit", "leftImg8bit")
        self._gt_root = _require_dir(self.root / "gtFine", "gtFine")
        self._queries = self._index(eval_split)
        self._pool = self._index("train")

    def _index(self, split: str) -> list[str]:
        base = self._img_root / split
        if not base.is_dir():
            raise IngestionError(base, f"split {split!r} not found")
        ids = []
        for png in sorted(base.glob("*/*_leftImg8bit.png")):
            ids.append(f"{split}/{png.parent.name}/{png.name[: -len('_leftImg8bit.png')]}")
        if not ids:
            raise IngestionError(base, "no images found")
        return ids

    def _paths(self, item_id: str):
        split, city, stem = item_id.split("/")
        return (
            self._img_root / split / city / f"{stem}_leftImg8bit.png",
            self._gt_root / split / city / f"{stem}_gtFine_labelIds.png",
        )

    def _annotation(self, item_id: str) -> ClassMap:
        _, gt_path = self._paths(item_id)
        if not gt_path.is_file():
            raise IngestionError(gt_path, "label map not found")
        with Image.open(gt_path) as im:
            label_ids = preprocess_labels(np.asarray(im), self.image_size)
        train_ids = np.full_like(label_ids, IGNORE_ID)
        for label, train in CITYSCAPES_LABEL_TO_TRAIN.items():
            train_ids[label_ids == label] = train
        return ClassMap(train_ids, num_classes=CITYSCAPES_NUM_CLASSES, ignore_id=IGNORE_ID)

    def query_ids(self) -> list[str]:
        return list(self._queries)

    def pool_ids(self, query_id: str) -> list[str]:
        return list(self._pool)

    def load_query(self, query_id: str):
        img_path, _ = self._paths(query_id)
        return load_image(img_path, size=self.image_size), self._annotation(query_id)

    def load_prompt(self, item_id: str):
        img_path, _ = self._paths(item_id)
        target = encode_target(self.task, self._annotation(item_id))
        return load_image(img_path, size=self.image_size), target

    def load_pool_image(self, item_id: str) -> ImageRGB:
        img_path, _ = self._paths(item_id)
        return load_image(img_path, size=self.image_size)

    @property
    def num_classes(self) -> int:
        return CITYSCAPES_NUM_CLASSES


class KeypointAdapter:
    """Keypoint detection over a generic landmarks layout.

    Expects root/images/... plus keypoints_train.jsonl and
    keypoints_val.jsonl records: {"image_id": relative path, "points":
    [[x, y, visible, group], ...]} in original pixel coordinates (see
    convert_deepfashion_landmarks for the DeepFashion conversion).
    """

    def __init__(self, root, eval_split: str = "val", image_size: int = 512, dataset_id: str = "keypoints"):
        self.root = _require_dir(Path(root), "dataset root")
        self.task = "keypoint_detection"
        self.split_id = eval_split
        self.image_size = image_size
        self.dataset_id = dataset_id
        self._images = _require_dir(self.root / "images", "images")
        self._queries = self._load_records(self.root / f"keypoints_{eval_split}.jsonl")
        self._pool = self._load_records(self.root / "keypoints_train.jsonl")

    @staticmethod
    def _load_records(path: Path) -> dict[str, list]:
        if not path.is_file():
            raise IngestionError(path, "landmark records not found")
        records = {}
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            records[row["image_id"]] = row["points"]
        if not records:
            raise IngestionError(path, "no landmark records")
        return records

    def _annotation(self, image_id: str, records: dict) -> KeypointSet:
        points = records[image_id]
        with Image.open(self._images / image_id) as im:
            orig_hw = (im.height, im.width)
        xy = np.array([[p[0], p[1]] for p in points], dtype=np.float64)
        mapped, inside = preprocess_points(xy, orig_hw, self.image_size)
        kept = []
        for (x, y), ok, p in zip(mapped, inside, points):
            visible = bool(p[2]) and bool(ok)
            group = str(p[3]) if len(p) > 3 else GROUP_BODY
            if visible:
                kept.append(Keypoint(x=float(x), y=float(y), visible=True, group=group))
        return KeypointSet(points=tuple(kept))

    def query_ids(self) -> list[str]:
        return sorted(self._queries)

    def pool_ids(self, query_id: str) -> list[str]:
        return sorted(self._pool)

    def load_query(self, query_id: str):
        img = load_image(self._images / query_id, size=self.image_size)
        return img, self._annotation(query_id, self._queries)

    def load_prompt(self, image_id: str):
        img = load_image(self._images / image_id, size=self.image_size)
        ann = self._annotation(image_id, self._pool)
        return img, encode_target(self.task, ann, image_hw=(self.image_size, self.image_size))

    def load_pool_image(self, image_id: str) -> ImageRGB:
        return load_image(self._images / image_id, size=self.image_size)

    @property
    def num_classes(self):
        return None


class EdgeMapAdapter:
    """Edge detection over provided soft edge maps.

    Expects root/{split}/images/* paired by stem with root/{split}/edges/*
    grayscale maps. Pseudo-groundtruth generation from a learned edge
    detector is a separate optional ingestion step (prepare_edge_maps).
    """

    def __init__(self, root, eval_split: str = "val", image_size: int = 512, dataset_id: str = "nyudv2_edges"):
        self.root = _require_dir(Path(root), "dataset root")
        self.task = "edge_detection"
        self.split_id = eval_split
        self.image_size = image_size
        self.dataset_id = dataset_id
        self._queries = self._index(eval_split)
        self._pool = self._index("train")

    def _index(self, split: str) -> dict[str, tuple[Path, Path]]:
        images = _require_dir(self.root / split / "images", f"{split} images")
        edges = _require_dir(self.root / split / "edges", f"{split} edges")
        pairs = {}
        for img_path in sorted(images.iterdir()):
            if not img_path.is_file():
                continue
            matches = sorted(edges.glob(img_path.stem + ".*"))
            if not matches:
                raise IngestionError(edges / img_path.stem, "no edge map for image")
            pairs[f"{split}/{img_path.name}"] = (img_path, matches[0])
        if not pairs:
            raise IngestionError(images, "no images found")
        return pairs

    def _lookup(self, item_id: str):
        table = self._queries if item_id in self._queries else self._pool
        if item_id not in table:
            raise IngestionError(self.root / item_id, "unknown item id")
        return table[item_id]

    def _annotation(self, item_id: str) -> EdgeMap:
        _, edge_path = self._lookup(item_id)
        with Image.open(edge_path) as im:
            gray = im.convert("L")
            arr = np.asarray(preprocess_image(gray.convert("RGB"), self.image_size).pixels.mean(axis=2))
        return EdgeMap(arr)

    def query_ids(self) -> list[str]:
        return sorted(self._queries)

    def pool_ids(self, query_id: str) -> list[str]:
        return sorted(self._pool)

    def load_query(self, item_id: str):
        img_path, _ = self._lookup(item_id)
        return load_image(img_path, size=self.image_size), self._annotation(item_id)

    def load_prompt(self, item_id: str):
        img_path, _ = self._lookup(item_id)
        return load_image(img_path, size=self.image_size), encode_target(self.task, self._annotation(item_id))

    def load_pool_image(self, item_id: str) -> ImageRGB:
        img_path, _ = self._lookup(item_id)
        return load_image(img_path, size=self.image_size)

    @property
    def num_classes(self):
        return None


class ColorizationAdapter:
    """Colorization over any image tree: queries are grayscaled eval images.

    Expects root/train/** and root/val/** image files. The groundtruth is
    the color image; prompt pairs are (grayscale, color) of pool images.
    """

    EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp")

    def __init__(self, root, eval_split: str = "val", image_size: int = 512, dataset_id: str = "imagenet_colorization"):
        self.root = _require_dir(Path(root), "dataset root")
        self.task = "colorization"
        self.split_id = eval_split
        self.image_size = image_size
        self.dataset_id = dataset_id
        self._queries = self._index(eval_split)
        self._pool = self._index("train")

    def _index(self, split: str) -> dict[str, Path]:
        base = _require_dir(self.root / split, f"{split} split")
        found = {}
        for path in sorted(base.rglob("*")):
            if path.is_file() and path.suffix.lower() in self.EXTENSIONS:
                found[f"{split}/{path.relative_to(base)}"] = path
        if not found:
            raise IngestionError(base, "no images found")
        return found

    def _path(self, item_id: str) -> Path:
        table = self._queries if item_id in self._queries else self._pool
        if item_id not in table:
            raise IngestionError(self.root / item_id, "unknown item id")
        return table[item_id]

    def query_ids(self) -> list[str]:
        return sorted(self._queries)

    def pool_ids(self, query_id: str) -> list[str]:
        return sorted(self._pool)

    def load_query(self, item_id: str):
        color = load_image(self._path(item_id), size=self.image_size)
        return grayscale(color), color

    def load_prompt(self, item_id: str):
        color = load_image(self._path(item_id), size=self.image_size)
        return grayscale(color), color

    def load_pool_image(self, item_id: str) -> ImageRGB:
        return load_image(self._path(item_id), size=self.image_size)

    @property
    def num_classes(self):
        return None


def make_adapter(dataset: str, root, task: str, split, image_size: int = 512):
    """Adapter factory keyed by dataset name."""
    if dataset == "pascal5i":
        return Pascal5iAdapter(root, split_id=int(split), task=task, image_size=image_size)
    if dataset == "cityscapes":
        return CityscapesAdapter(root, eval_split=str(split or "val"), image_size=image_size)
    if dataset in ("deepfashion", "keypoints"):
        return KeypointAdapter(root, eval_split=str(split or "val"), image_size=image_size, dataset_id=dataset)
    if dataset in ("nyudv2", "edges"):
        return EdgeMapAdapter(root, eval_split=str(split or "val"), image_size=image_size)
    if dataset in ("imagenet", "colorization"):
        return ColorizationAdapter(root, eval_split=str(split or "val"), image_size=image_size)
    raise IngestionError(root, f"unknown dataset {dataset!r}")


def _stable_rng(seed: int, *parts) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def build_episodes(
    adapter,
    config: VICLConfig,
    retrieval=None,
    seed: int = 0,
    subsample: int | None = None,
    cache_path=None,
    include_self: bool = False,
) -> list[EpisodeSpec]:
    """Deterministic episode list for one adapter and config.

    ``retrieval`` may be None (seeded random prompts from the pool), an
    encoder name, or an encoder backend; embeddings go through the on-disk
    cache when a path is given. ``subsample`` keeps a seeded subset of
    queries for desk-scale runs. ``include_self`` allows the query itself as
    a prompt (self-prompt sanity experiments).
    """
    query_ids = adapter.query_ids()
    if subsample is not None and subsample < len(query_ids):
        rng = _stable_rng(seed, "subsample", adapter.dataset_id, adapter.split_id)
        picked = rng.choice(len(query_ids), size=subsample, replace=False)
        query_ids = [query_ids[i] for i in sorted(picked)]

    encoder = None
    if retrieval is not None:
        encoder = retrieval_mod.make_encoder(retrieval) if isinstance(retrieval, str) else retrieval

    cache = None
    if encoder is not None and cache_path is not None:
        cache = retrieval_mod.EmbeddingCache(cache_path, encoder_id=encoder.encoder_id)

    episodes = []
    for query_id in query_ids:
        pool = adapter.pool_ids(query_id)
        if not include_self:
            pool = [p for p in pool if p != query_id]
        if len(pool) == 0:
            continue
        n = min(config.n_prompts, len(pool))
        if encoder is None:
            rng = _stable_rng(seed, "prompts", query_id)
            picked = rng.choice(len(pool), size=n, replace=False)
            prompt_ids = tuple(pool[i] for i in picked)
        else:
            records = []
            for pid in pool:
                if cache is not None and pid in cache:
                    records.append(cache.get(pid))
                else:
                    rec = retrieval_mod.embed(adapter.load_pool_image(pid), encoder, image_id=pid)
                    records.append(rec)
                    if cache is not None:
                        cache.add(rec)
            query_rec = retrieval_mod.embed(adapter.load_pool_image(query_id), encoder, image_id=query_id)
            prompt_ids = tuple(retrieval_mod.retrieve(query_rec, records, n, include_self=include_self))
        episodes.append(
            EpisodeSpec(
                dataset_id=adapter.dataset_id,
                split_id=str(adapter.split_id),
                query_id=query_id,
                prompt_ids=prompt_ids,
                task=adapter.task,
                config=dataclasses.replace(config, n_prompts=len(prompt_ids)),
            )
        )
    if cache is not None and len(cache):
        cache.save()
    return episodes


def prepare_edge_maps(images_dir, edges_dir, provider) -> int:
    """Optional ingestion: render soft edge maps for images lacking one.

    ``provider`` maps an ImageRGB to an (H, W) float edge map; returns the
    number of maps written.
    """
    images_dir = _require_dir(Path(images_dir), "images")
    edges_dir = Path(edges_dir)
    edges_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for img_path in sorted(images_dir.iterdir()):
        if not img_path.is_file():
            continue
        out = edges_dir / f"{img_path.stem}.png"
        if out.exists():
            continue
        edge = np.clip(np.asarray(provider(load_image(img_path)), dtype=np.float32), 0.0, 1.0)
        Image.fromarray((edge * 255.0 + 0.5).astype(np.uint8), mode="L").save(out)
        written += 1
    return written


def convert_deepfashion_landmarks(landmarks_file, partition_file, out_dir) -> tuple[int, int]:
    """Convert DeepFashion in-shop landmark records to the adapter layout.

    Landmarks ride as body-group points (the source schema has no facial
    landmarks); visibility 0 maps to visible. Returns (train, val) record
    counts written to keypoints_train.jsonl / keypoints_val.jsonl.
    """
    landmarks_file = Path(landmarks_file)
    partition_file = Path(partition_file)
    if not landmarks_file.is_file():
        raise IngestionError(landmarks_file, "landmarks file not found")
    if not partition_file.is_file():
        raise IngestionError(partition_file, "partition file not found")

    split_of = {}
    part_lines = partition_file.read_text().splitlines()
    for line in part_lines[2:]:  # count line + header line
        fields = line.split()
        if len(fields) >= 3:
            split_of[fields[0]] = "train" if fields[-1] == "train" else "val"

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handles = {
        "train": open(out_dir / "keypoints_train.jsonl", "w"),
        "val": open(out_dir / "keypoints_val.jsonl", "w"),
    }
    counts = {"train": 0, "val": 0}
    try:
        lines = landmarks_file.read_text().splitlines()
        for line in lines[2:]:
            fields = line.split()
            if len(fields) < 3:
                continue
            image_id = fields[0]
            split = split_of.get(image_id)
            if split is None:
                continue
            triples = fields[3:]
            points = []
            for i in range(0, len(triples) - 2, 3):
                vis, x, y = int(triples[i]), float(triples[i + 1]), float(triples[i + 2])
                points.append([x, y, vis == 0, GROUP_BODY])
            handles[split].write(json.dumps({"image_id": image_id, "points": points}) + "\n")
            counts[split] += 1
    finally:
        for h in handles.values():
            h.close()
    return counts["train"], counts["val"]
