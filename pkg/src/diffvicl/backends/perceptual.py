"""Perceptual feature backends for LPIPS-style and Frechet scoring.

The random-projection backend is weight-free and deterministic; its numbers
are internally consistent (zero for identical sets, positive for perturbed
ones) but are not comparable to published scores from learned extractors.
The torch adapter plugs in a learned extractor when weights are available.
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np
from PIL import Image

from ..core import ImageRGB
from ..errors import BackendError


class RandomProjectionPerceptual:
    """Seeded random projection of downsampled pixels as a feature space."""

    def __init__(self, feature_dim: int = 64, grid: int = 16, seed: int = 0):
        self.grid = int(grid)
        self.feature_dim = int(feature_dim)
        self.backend_id = f"randproj-{self.grid}x{self.grid}-d{self.feature_dim}-s{seed}"
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(scale=(3 * self.grid**2) ** -0.5, size=(3 * self.grid**2, self.feature_dim)).astype(
            np.float32
        )

    def _one(self, img: ImageRGB) -> np.ndarray:
        arr = (img.pixels * 255.0 + 0.5).astype(np.uint8)
        small = Image.fromarray(arr).resize((self.grid, self.grid), Image.BILINEAR)
        flat = np.asarray(small, dtype=np.float32).reshape(-1) / 255.0
        return flat @ self._proj

    def features(self, images: Sequence[ImageRGB]) -> np.ndarray:
        return np.stack([self._one(im) for im in images])

    def pair_distance(self, a: ImageRGB, b: ImageRGB) -> float:
        fa, fb = self._one(a), self._one(b)
        return float(np.mean((fa - fb) ** 2))


class TorchPerceptualBackend:
    """Learned perceptual adapter (lazy imports; needs downloaded weights).

    Uses the lpips package for pairwise distances and a torchvision
    inception-v3 trunk for set features when both are importable and their
    weights are reachable.
    """

    def __init__(self, device: str | None = None):
        self.device = device or os.environ.get("DIFFVICL_DEVICE", "cpu")
        self.backend_id = "lpips+inception"
        self._lpips = None
        self._inception = None

    def _ensure_loaded(self):
        if self._lpips is not None:
            return
        try:
            import lpips
            import torch
            import torchvision
        except ImportError as exc:
            raise BackendError(f"perceptual backend needs torch, torchvision, lpips: {exc}") from exc
        self._torch = torch
        self._lpips = lpips.LPIPS(net="alex").to(self.device).eval()
        inception = torchvision.models.inception_v3(weights="DEFAULT", aux_logits=True)
        inception.fc = torch.nn.Identity()
        self._inception = inception.to(self.device).eval()

    def _to_tensor(self, img: ImageRGB, size: int | None = None):
        torch = self._torch
        arr = img.pixels
        if size is not None and arr.shape[0] != size:
            arr = np.asarray(
                Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).resize((size, size), Image.BILINEAR),
                dtype=np.float32,
            ) / 255.0
        return torch.from_numpy(arr.transpose(2, 0, 1)[None]).to(self.device)

    def features(self, images: Sequence[ImageRGB]) -> np.ndarray:
        self._ensure_loaded()
        torch = self._torch
        feats = []
        with torch.no_grad():
            for img in images:
                x = self._to_tensor(img, size=299) * 2.0 - 1.0
                feats.append(self._inception(x).squeeze(0).cpu().numpy())
        return np.stack(feats)

    def pair_distance(self, a: ImageRGB, b: ImageRGB) -> float:
        self._ensure_loaded()
        torch = self._torch
        with torch.no_grad():
            d = self._lpips(self._to_tensor(a) * 2.0 - 1.0, self._to_tensor(b) * 2.0 - 1.0)
        return float(d.item())
