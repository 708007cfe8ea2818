"""Latent diffusion backend adapter over a pretrained v1.x checkpoint.

Wraps the denoising U-Net, autoencoder, and text encoder behind the numpy
DenoiserBackend protocol. The text condition is fixed to the empty string
for every call; decoder ("up") self-attention layers are exposed as
interceptable sites whose Q/K/V are handed to the interceptor before the
attention product is formed. Weights load lazily from ``model_path`` or the
DIFFVICL_SD_WEIGHTS location, so importing this module costs nothing.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..attention import AttentionSite
from ..errors import BackendError, DimensionError


class _InterceptProcessor:
    """Attention processor that offers Q/K/V to the backend's interceptor."""

    def __init__(self, backend: "StableDiffusionBackend", site: AttentionSite):
        self._backend = backend
        self._site = site

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        torch = self._backend._torch
        if encoder_hidden_states is not None:
            raise BackendError("interception is wired to self-attention only")
        batch, tokens, _ = hidden_states.shape
        if batch != 1:
            raise BackendError(f"interceptable forward expects batch 1, got {batch}")
        heads = attn.heads
        q = attn.to_q(hidden_states)
        k = attn.to_k(hidden_states)
        v = attn.to_v(hidden_states)
        head_dim = q.shape[-1] // heads
        qh = q.view(1, tokens, heads, head_dim).permute(0, 2, 1, 3)
        kh = k.view(1, tokens, heads, head_dim).permute(0, 2, 1, 3)
        vh = v.view(1, tokens, heads, head_dim).permute(0, 2, 1, 3)

        update = None
        interceptor = self._backend._interceptor
        if interceptor is not None:
            q_np = qh[0].float().cpu().numpy()
            k_np = kh[0].float().cpu().numpy()
            v_np = vh[0].float().cpu().numpy()
            update = interceptor(self._site, q_np, k_np, v_np)
        if update is None:
            out = torch.nn.functional.scaled_dot_product_attention(qh, kh, vh)
        else:
            update = np.asarray(update)
            if update.shape != (heads, tokens, head_dim):
                raise DimensionError(
                    f"site {self._site.key}: replacement update shape {update.shape}, "
                    f"expected {(heads, tokens, head_dim)}"
                )
            out = torch.from_numpy(update).to(device=hidden_states.device, dtype=hidden_states.dtype)[None]
        merged = out.permute(0, 2, 1, 3).reshape(1, tokens, heads * head_dim)
        merged = attn.to_out[0](merged)
        return attn.to_out[1](merged)


class StableDiffusionBackend:
    """DenoiserBackend over diffusers' v1.x UNet + VAE (lazy loading)."""

    def __init__(self, model_path: str | None = None, device: str | None = None, image_size: int = 512):
        self.model_path = model_path or os.environ.get("DIFFVICL_SD_WEIGHTS")
        self.device = device or os.environ.get("DIFFVICL_DEVICE", "cpu")
        self.image_size = int(image_size)
        self.latent_size = self.image_size // 8
        self.latent_channels = 4
        self.base_timesteps = 1000
        self._loaded = False
        self._interceptor = None
        self._sites: tuple[AttentionSite, ...] = ()
        self._alphas: np.ndarray | None = None

    # -- loading -------------------------------------------------------------

    def _load(self):
        if self._loaded:
            return
        if not self.model_path:
            raise BackendError(
                "no diffusion weights configured; set DIFFVICL_SD_WEIGHTS or pass model_path"
            )
        if not Path(self.model_path).exists():
            raise BackendError(f"diffusion weights not found at {self.model_path}")
        try:
            import torch
            from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendError(f"the diffusion backend needs torch, diffusers, transformers: {exc}") from exc
        self._torch = torch
        root = self.model_path
        self.unet = UNet2DConditionModel.from_pretrained(root, subfolder="unet").to(self.device).eval()
        self.vae = AutoencoderKL.from_pretrained(root, subfolder="vae").to(self.device).eval()
        tokenizer = CLIPTokenizer.from_pretrained(root, subfolder="tokenizer")
        text_encoder = CLIPTextModel.from_pretrained(root, subfolder="text_encoder").to(self.device).eval()
        scheduler = DDPMScheduler.from_pretrained(root, subfolder="scheduler")
        self.base_timesteps = int(scheduler.config.num_train_timesteps)
        self._alphas = scheduler.alphas_cumprod.double().cpu().numpy()
        self._scaling = float(self.vae.config.scaling_factor)

        with torch.no_grad():
            tokens = tokenizer(
                "", padding="max_length", max_length=tokenizer.model_max_length, return_tensors="pt"
            )
            self._empty_text = text_encoder(tokens.input_ids.to(self.device))[0]

        sites = []
        layer = 0
        up_blocks = list(self.unet.up_blocks)
        for block_index, block in enumerate(up_blocks):
            if not getattr(block, "attentions", None):
                continue
            resolution = self.latent_size // (2 ** (len(up_blocks) - 1 - block_index))
            for transformer in block.attentions:
                for tb in transformer.transformer_blocks:
                    site = AttentionSite(layer_index=layer, resolution=int(resolution))
                    tb.attn1.set_processor(_InterceptProcessor(self, site))
                    sites.append(site)
                    layer += 1
        self._sites = tuple(sites)
        self._loaded = True

    @property
    def alphas_cumprod(self) -> np.ndarray:
        self._load()
        return self._alphas

    def attention_sites(self) -> tuple[AttentionSite, ...]:
        self._load()
        return self._sites

    # -- protocol ------------------------------------------------------------

    def predict_noise(self, latent: np.ndarray, timestep: int, interceptor=None) -> np.ndarray:
        self._load()
        torch = self._torch
        z = np.asarray(latent, dtype=np.float32)
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if z.shape != expected:
            raise DimensionError(f"latent shape {z.shape}, backend expects {expected}")
        if not (0 <= timestep < self.base_timesteps):
            raise BackendError(f"timestep {timestep} outside [0, {self.base_timesteps})")
        self._interceptor = interceptor
        try:
            with torch.no_grad():
                sample = torch.from_numpy(z)[None].to(self.device)
                out = self.unet(sample, int(timestep), encoder_hidden_states=self._empty_text).sample
        finally:
            self._interceptor = None
        return out[0].float().cpu().numpy()

    def encode(self, image: np.ndarray) -> np.ndarray:
        self._load()
        torch = self._torch
        x = np.asarray(image, dtype=np.float32)
        if x.shape != (self.image_size, self.image_size, 3):
            raise DimensionError(f"image shape {x.shape}, backend expects {(self.image_size, self.image_size, 3)}")
        with torch.no_grad():
            t = torch.from_numpy(x.transpose(2, 0, 1))[None].to(self.device) * 2.0 - 1.0
            posterior = self.vae.encode(t).latent_dist
            z = posterior.mode() * self._scaling  # mode, not sample: encoding must be deterministic
        return z[0].float().cpu().numpy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        self._load()
        torch = self._torch
        z = np.asarray(latent, dtype=np.float32)
        with torch.no_grad():
            t = torch.from_numpy(z)[None].to(self.device) / self._scaling
            img = self.vae.decode(t).sample
        out = ((img[0].float().cpu().numpy() + 1.0) / 2.0).transpose(1, 2, 0)
        return np.clip(out, 0.0, 1.0)


def backend_available() -> bool:
    """True when diffusion weights are configured and importable."""
    path = os.environ.get("DIFFVICL_SD_WEIGHTS")
    if not path or not Path(path).exists():
        return False
    try:
        import diffusers  # noqa: F401
        import torch  # noqa: F401
        import transformers  # noqa: F401
    except ImportError:
        return False
    return True
