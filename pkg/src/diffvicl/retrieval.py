"""Unsupervised prompt retrieval by embedding cosine similarity.

Prompt candidates for a query are its nearest neighbors in a vision
encoder's embedding space. The encoder is pluggable; a contrastive
vision-language encoder is the intended production choice, and a weight-free
downsampling encoder is provided for tests and offline use. Embeddings are
cached on disk so pools are built once per dataset.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import ImageRGB
from .errors import BackendError, IncompatibleEmbeddingsError

_NORM_TOL = 1e-5


@runtime_checkable
class VisionEncoderBackend(Protocol):
    """Image to fixed-length vector; deterministic per encoder version."""

    encoder_id: str

    def embed_image(self, img: ImageRGB) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """A unit-norm embedding for one image under one encoder."""

    image_id: str
    vector: np.ndarray
    encoder_id: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > _NORM_TOL:
            raise ValueError(f"embedding for {self.image_id!r} has norm {norm:.6f}, expected 1")
        object.__setattr__(self, "vector", v)


def embed(img: ImageRGB, encoder: VisionEncoderBackend, image_id: str = "") -> EmbeddingRecord:
    """Embed an image and normalize to unit length."""
    raw = np.asarray(encoder.embed_image(img), dtype=np.float32).reshape(-1)
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        raise BackendError(f"encoder {encoder.encoder_id} returned a zero embedding")
    return EmbeddingRecord(image_id=image_id, vector=raw / norm, encoder_id=encoder.encoder_id)


def retrieve(
    query: EmbeddingRecord,
    pool: Sequence[EmbeddingRecord],
    n: int,
    include_self: bool = False,
) -> list[str]:
    """Top-n pool image ids by descending cosine similarity to the query.

    Ties break lexicographically by image id so rankings are reproducible.
    The query's own id is dropped from the pool unless ``include_self`` is
    set (self-prompt experiments). Asking for more than the pool holds
    returns the whole ranking.
    """
    if len(pool) == 0:
        raise ValueError("retrieval pool is empty")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    mixed = {r.encoder_id for r in pool} | {query.encoder_id}
    if len(mixed) > 1:
        raise IncompatibleEmbeddingsError(f"mixed encoder ids: {sorted(mixed)}")
    candidates = [r for r in pool if include_self or r.image_id != query.image_id]
    scored = sorted(
        ((float(query.vector @ r.vector), r.image_id) for r in candidates),
        key=lambda pair: (-pair[0], pair[1]),
    )
    return [image_id for _, image_id in scored[:n]]


class EmbeddingCache:
    """On-disk embedding store with an integrity header.

    One container file per pool; reads are cheap and concurrent, writes
    replace the file atomically. Records are keyed by image id.
    """

    _FORMAT = "diffvicl-embeddings-v1"

    def __init__(self, path, encoder_id: str | None = None):
        self.path = Path(path)
        self.encoder_id = encoder_id
        self._records: dict[str, np.ndarray] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with np.load(self.path, allow_pickle=False) as data:
            if str(data["format"]) != self._FORMAT:
                raise IncompatibleEmbeddingsError(f"unrecognized cache format in {self.path}")
            stored_encoder = str(data["encoder_id"])
            vectors = np.asarray(data["vectors"], dtype=np.float32)
            ids = [str(i) for i in data["image_ids"]]
            checksum = hashlib.sha256(vectors.tobytes()).hexdigest()
            if checksum != str(data["checksum"]):
                raise IncompatibleEmbeddingsError(f"cache {self.path} failed its integrity check")
        if self.encoder_id is None:
            self.encoder_id = stored_encoder
        elif self.encoder_id != stored_encoder:
            raise IncompatibleEmbeddingsError(
                f"cache {self.path} holds {stored_encoder!r} embeddings, expected {self.encoder_id!r}"
            )
        self._records = dict(zip(ids, vectors))

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def ids(self) -> list[str]:
        return sorted(self._records)

    def get(self, image_id: str) -> EmbeddingRecord:
        return EmbeddingRecord(image_id=image_id, vector=self._records[image_id], encoder_id=self.encoder_id)

    def records(self) -> list[EmbeddingRecord]:
        return [self.get(i) for i in self.ids()]

    def add(self, record: EmbeddingRecord) -> None:
        if self.encoder_id is None:
            self.encoder_id = record.encoder_id
        if record.encoder_id != self.encoder_id:
            raise IncompatibleEmbeddingsError(
                f"cache holds {self.encoder_id!r} embeddings, got {record.encoder_id!r}"
            )
        self._records[record.image_id] = record.vector

    def save(self) -> None:
        if self.encoder_id is None:
            raise ValueError("cannot save a cache with no records")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        ids = self.ids()
        vectors = np.stack([self._records[i] for i in ids]) if ids else np.zeros((0, 0), np.float32)
        tmp = self.path.with_name(self.path.name + f".tmp{os.getpid()}")
        np.savez_compressed(
            tmp,
            format=np.array(self._FORMAT),
            encoder_id=np.array(self.encoder_id),
            image_ids=np.array(ids),
            vectors=vectors,
            checksum=np.array(hashlib.sha256(vectors.tobytes()).hexdigest()),
        )
        saved = tmp if tmp.exists() else tmp.with_name(tmp.name + ".npz")
        saved.replace(self.path)


def embed_pool(
    images: dict[str, ImageRGB], encoder: VisionEncoderBackend, cache: EmbeddingCache | None = None
) -> list[EmbeddingRecord]:
    """Embed every image not already cached; returns records for all ids."""
    out = []
    dirty = False
    for image_id in sorted(images):
        if cache is not None and image_id in cache:
            out.append(cache.get(image_id))
            continue
        record = embed(images[image_id], encoder, image_id=image_id)
        if cache is not None:
            cache.add(record)
            dirty = True
        out.append(record)
    if cache is not None and dirty:
        cache.save()
    return out


class DownsampleEncoder:
    """Weight-free fallback encoder: a grid of mean colors.

    Deterministic and dependency-free; rankings are far weaker than a
    learned encoder's and it exists for tests, demos, and plumbing checks.
    """

    def __init__(self, grid: int = 8):
        self.grid = int(grid)
        self.encoder_id = f"downsample-{self.grid}"

    def embed_image(self, img: ImageRGB) -> np.ndarray:
        from PIL import Image

        arr = (img.pixels * 255.0 + 0.5).astype(np.uint8)
        small = Image.fromarray(arr).resize((self.grid, self.grid), Image.BILINEAR)
        feats = np.asarray(small, dtype=np.float32).reshape(-1) / 255.0
        return feats - feats.mean()


class ClipVisionEncoder:
    """Contrastive vision-language encoder adapter (lazy torch import).

    Weights come from ``model_path`` or the DIFFVICL_CLIP_WEIGHTS location;
    loading is deferred until the first embedding call.
    """

    def __init__(self, model_path: str | None = None, device: str | None = None):
        self.model_path = model_path or os.environ.get("DIFFVICL_CLIP_WEIGHTS")
        self.device = device or os.environ.get("DIFFVICL_DEVICE", "cpu")
        self.encoder_id = f"clip:{Path(self.model_path).name}" if self.model_path else "clip:unset"
        self._model = None
        self._processor = None

    def _ensure_loaded(self):
        if self._model is not None:
            return
        if not self.model_path:
            raise BackendError(
                "no vision-encoder weights configured; set DIFFVICL_CLIP_WEIGHTS or pass model_path"
            )
        try:
            import torch  # noqa: F401
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as exc:
            raise BackendError(f"clip encoder needs torch and transformers installed: {exc}") from exc
        self._model = CLIPVisionModelWithProjection.from_pretrained(self.model_path).to(self.device).eval()
        self._processor = CLIPImageProcessor.from_pretrained(self.model_path)

    def embed_image(self, img: ImageRGB) -> np.ndarray:
        self._ensure_loaded()
        import torch

        arr = (img.pixels * 255.0 + 0.5).astype(np.uint8)
        inputs = self._processor(images=arr, return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self._model(**inputs)
        return out.image_embeds[0].float().cpu().numpy()


def make_encoder(name: str) -> VisionEncoderBackend:
    """Encoder factory for the CLI: 'clip' (default) or 'downsample'."""
    if name == "clip":
        return ClipVisionEncoder()
    if name == "downsample":
        return DownsampleEncoder()
    raise BackendError(f"unknown encoder {name!r}; choose 'clip' or 'downsample'")
