"""Small deterministic denoiser for CPU tests, demos, and property suites.

Mirrors the structural contract of the latent-diffusion backend: a base
noise schedule over integer train timesteps, an 8x latent autoencoder, and
decoder self-attention sites that an interceptor can observe or override.
The network itself is a fixed seeded projection mixer; it predicts nothing
meaningful, but it is smooth, bounded, and bit-deterministic, which is all
the invariant tests need.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..attention import AttentionSite, AttentionTensors, standard_update
from ..core import LATENT_DOWNSAMPLE, VALID_RESOLUTIONS
from ..errors import BackendError, DimensionError


def scaled_linear_alphas(base_timesteps: int, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> np.ndarray:
    """Cumulative signal coefficients of a scaled-linear beta schedule."""
    betas = np.linspace(beta_start**0.5, beta_end**0.5, base_timesteps, dtype=np.float64) ** 2
    return np.cumprod(1.0 - betas)


class StubDenoiser:
    """Deterministic toy backend satisfying the DenoiserBackend protocol."""

    def __init__(
        self,
        latent_size: int = 32,
        latent_channels: int = 4,
        heads: int = 2,
        head_dim: int = 8,
        base_timesteps: int = 100,
        seed: int = 0,
        layers_per_resolution: int = 1,
        site_resolutions: tuple[int, ...] | None = None,
    ):
        self.base_timesteps = int(base_timesteps)
        self.latent_channels = int(latent_channels)
        self.latent_size = int(latent_size)
        self.image_size = self.latent_size * LATENT_DOWNSAMPLE
        self.heads = int(heads)
        self.head_dim = int(head_dim)
        self.alphas_cumprod = scaled_linear_alphas(self.base_timesteps)
        if site_resolutions is None:
            site_resolutions = tuple(r for r in VALID_RESOLUTIONS if r <= self.latent_size)
        for r in site_resolutions:
            if self.latent_size % r != 0:
                raise BackendError(f"site resolution {r} does not divide latent size {self.latent_size}")
        rng = np.random.default_rng(seed)
        c, hd = self.latent_channels, self.heads * self.head_dim
        self._sites: list[AttentionSite] = []
        self._weights: dict[AttentionSite, tuple] = {}
        layer = 0
        for r in sorted(site_resolutions):  # decoder runs coarse to fine
            for _ in range(layers_per_resolution):
                site = AttentionSite(layer_index=layer, resolution=int(r))
                wq = rng.normal(scale=c**-0.5, size=(c, hd)).astype(np.float32)
                wk = rng.normal(scale=c**-0.5, size=(c, hd)).astype(np.float32)
                wv = rng.normal(scale=c**-0.5, size=(c, hd)).astype(np.float32)
                wo = rng.normal(scale=hd**-0.5, size=(hd, c)).astype(np.float32)
                self._weights[site] = (wq, wk, wv, wo)
                self._sites.append(site)
                layer += 1

    def attention_sites(self) -> tuple[AttentionSite, ...]:
        return tuple(self._sites)

    # -- forward -----------------------------------------------------------

    def _tokens(self, z: np.ndarray, resolution: int) -> np.ndarray:
        c = z.shape[0]
        f = self.latent_size // resolution
        pooled = z.reshape(c, resolution, f, resolution, f).mean(axis=(2, 4))
        return pooled.reshape(c, resolution * resolution).T.astype(np.float32)

    def _site_qkv(self, z: np.ndarray, site: AttentionSite):
        wq, wk, wv, _ = self._weights[site]
        tokens = self._tokens(z, site.resolution)
        n = tokens.shape[0]

        def split(x):
            return x.reshape(n, self.heads, self.head_dim).transpose(1, 0, 2)

        return split(tokens @ wq), split(tokens @ wk), split(tokens @ wv)

    def _project_out(self, update: np.ndarray, site: AttentionSite) -> np.ndarray:
        _, _, _, wo = self._weights[site]
        r = site.resolution
        n = r * r
        if update.shape != (self.heads, n, self.head_dim):
            raise DimensionError(
                f"site {site.key}: update shape {update.shape}, "
                f"expected {(self.heads, n, self.head_dim)}"
            )
        merged = update.transpose(1, 0, 2).reshape(n, self.heads * self.head_dim)
        grid = (merged @ wo).T.reshape(self.latent_channels, r, r)
        f = self.latent_size // r
        return np.kron(grid, np.ones((f, f), dtype=np.float32))

    def predict_noise(self, latent: np.ndarray, timestep: int, interceptor=None) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float32)
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if z.shape != expected:
            raise DimensionError(f"latent shape {z.shape}, backend expects {expected}")
        if not (0 <= timestep < self.base_timesteps):
            raise BackendError(f"timestep {timestep} outside [0, {self.base_timesteps})")
        tt = np.float32(0.5 + timestep / self.base_timesteps)
        out = np.float32(0.25) * np.tanh(z) * tt
        for site in self._sites:
            q, k, v = self._site_qkv(z, site)
            update = None
            if interceptor is not None:
                update = interceptor(site, q, k, v)
            if update is None:
                update = standard_update(AttentionTensors(q, k, v, site=site, timestep=timestep))
            out = out + np.float32(0.1) * self._project_out(np.asarray(update, dtype=np.float32), site)
        return out

    # -- autoencoder ---------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) pixels in [0, 1] to a (4, h, w) latent in roughly [-1, 1]."""
        x = np.asarray(image, dtype=np.float32)
        if x.shape != (self.image_size, self.image_size, 3):
            raise DimensionError(f"image shape {x.shape}, backend expects {(self.image_size, self.image_size, 3)}")
        if self.latent_channels != 4:
            raise BackendError("stub autoencoder is defined for 4 latent channels")
        f = LATENT_DOWNSAMPLE
        h = self.latent_size
        pooled = x.reshape(h, f, h, f, 3).mean(axis=(1, 3))
        lum = pooled.mean(axis=2, keepdims=True)
        z = np.concatenate([pooled, lum], axis=2).transpose(2, 0, 1)
        return ((z - np.float32(0.5)) * np.float32(2.0)).astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float32)
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if z.shape != expected:
            raise DimensionError(f"latent shape {z.shape}, backend expects {expected}")
        rgb = z[:3] / np.float32(2.0) + np.float32(0.5)
        up = ndimage.zoom(rgb, (1, LATENT_DOWNSAMPLE, LATENT_DOWNSAMPLE), order=1, mode="nearest")
        return np.clip(up.transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)
