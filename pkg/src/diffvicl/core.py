"""Shared domain types, schedule construction, and configuration handling.

Everything here is a pure value type or a pure function; instances are safe
to share read-only across workers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, InvalidConfigError

MODEL_INPUT_SIZE = 512
LATENT_DOWNSAMPLE = 8

VALID_RESOLUTIONS = (16, 32, 64)
ENSEMBLE_MODES = ("iwpe", "fe")
Q_SOURCES = ("query", "prediction")
K_SOURCES = ("prompt_image", "prompt_target")
ADAIN_POSITIONS = ("pre", "post")

CONFIG_FILE_KEYS = ("steps", "tau", "beta", "gamma", "resolutions", "ensemble", "n_prompts", "seed")


@dataclass(frozen=True, eq=False)
class ImageRGB:
    """An RGB image with float pixels in [0, 1], shape (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DimensionError(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.size and (px.min() < -1e-4 or px.max() > 1 + 1e-4):
            raise ValueError(f"pixel values outside [0, 1]: [{px.min()}, {px.max()}]")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class Latent:
    """A latent-space tensor of shape (C, h, w) with a schedule position tag.

    ``timestep_tag`` counts schedule positions: 0 is clean, T is terminal.
    """

    values: np.ndarray
    timestep_tag: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DimensionError(f"expected (C, h, w) latent, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent contains non-finite values")
        if self.timestep_tag < 0:
            raise ValueError("timestep_tag must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class PathId:
    """Identifies one of the parallel denoising paths in an episode.

    Roles: the query image, the generated prediction, and per-prompt
    image/target pairs indexed from 1.
    """

    role: str
    index: int | None = None

    QUERY = "query"
    PREDICTION = "prediction"
    PROMPT_IMAGE = "prompt_image"
    PROMPT_TARGET = "prompt_target"

    def __post_init__(self):
        if self.role in (self.QUERY, self.PREDICTION):
            if self.index is not None:
                raise ValueError(f"{self.role} path takes no index")
        elif self.role in (self.PROMPT_IMAGE, self.PROMPT_TARGET):
            if self.index is None or self.index < 1:
                raise ValueError(f"{self.role} path needs a 1-based prompt index")
        else:
            raise ValueError(f"unknown path role {self.role!r}")

    @classmethod
    def query(cls) -> "PathId":
        return cls(cls.QUERY)

    @classmethod
    def prediction(cls) -> "PathId":
        return cls(cls.PREDICTION)

    @classmethod
    def prompt_image(cls, i: int) -> "PathId":
        return cls(cls.PROMPT_IMAGE, i)

    @classmethod
    def prompt_target(cls, i: int) -> "PathId":
        return cls(cls.PROMPT_TARGET, i)

    @property
    def key(self) -> str:
        return self.role if self.index is None else f"{self.role}_{self.index}"


@dataclass(frozen=True)
class DenoiseSchedule:
    """Strictly decreasing timestep indices plus their noise-level coefficients.

    ``alpha_bars[k]`` is the cumulative signal coefficient at step k's train
    index; ``alpha_bars_prev[k]`` is the coefficient of the step's landing
    index (the next scheduled index, or the base schedule's index 0 for the
    final step). Coefficients are optional until a backend supplies them.
    """

    num_steps: int
    timestep_indices: tuple[int, ...]
    base_timesteps: int
    alpha_bars: tuple[float, ...] | None = None
    alpha_bars_prev: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.timestep_indices) != self.num_steps:
            raise InvalidConfigError("steps", "index count does not match num_steps")
        if any(b <= a for a, b in zip(self.timestep_indices[1:], self.timestep_indices[:-1])):
            raise InvalidConfigError("steps", "timestep indices must be strictly decreasing")
        if self.alpha_bars is not None and len(self.alpha_bars) != self.num_steps:
            raise InvalidConfigError("steps", "alpha_bars length does not match num_steps")
        if self.alpha_bars_prev is not None and len(self.alpha_bars_prev) != self.num_steps:
            raise InvalidConfigError("steps", "alpha_bars_prev length does not match num_steps")

    def with_noise_levels(self, alphas_cumprod: np.ndarray) -> "DenoiseSchedule":
        """Attach coefficients read off a base noise schedule."""
        ac = np.asarray(alphas_cumprod, dtype=np.float64)
        if ac.shape != (self.base_timesteps,):
            raise InvalidConfigError(
                "steps", f"base schedule has {ac.shape[0]} entries, expected {self.base_timesteps}"
            )
        idx = np.asarray(self.timestep_indices)
        bars = ac[idx]
        prev = np.concatenate([ac[idx[1:]], [ac[0]]])
        return dataclasses.replace(
            self, alpha_bars=tuple(float(b) for b in bars), alpha_bars_prev=tuple(float(p) for p in prev)
        )

    @property
    def has_noise_levels(self) -> bool:
        return self.alpha_bars is not None and self.alpha_bars_prev is not None


def make_schedule(T: int, base_timesteps: int, alphas_cumprod: np.ndarray | None = None) -> DenoiseSchedule:
    """Build a T-step schedule of evenly spaced indices over [0, base_timesteps).

    Spacing is linear from the top index downward: index k sits at
    ``base_timesteps - 1 - (k * base_timesteps) // T``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidConfigError("steps", f"need a positive integer step count, got {T!r}")
    if base_timesteps < 1:
        raise InvalidConfigError("steps", f"base timestep count must be positive, got {base_timesteps}")
    if T > base_timesteps:
        raise InvalidConfigError("steps", f"T={T} exceeds base timestep count {base_timesteps}")
    indices = tuple(base_timesteps - 1 - (k * base_timesteps) // T for k in range(T))
    sched = DenoiseSchedule(num_steps=int(T), timestep_indices=indices, base_timesteps=int(base_timesteps))
    if alphas_cumprod is not None:
        sched = sched.with_noise_levels(alphas_cumprod)
    return sched


def schedule_for_backend(T: int, backend) -> DenoiseSchedule:
    """Convenience: schedule with noise levels taken from a denoiser backend."""
    return make_schedule(T, backend.base_timesteps, backend.alphas_cumprod)


@dataclass(frozen=True)
class VICLConfig:
    """Full determinism contract for one in-context prediction.

    The first eight fields mirror the flat config-file keys. The remaining
    switches select ablation variants and default to the main formulation.
    """

    steps: int = 70
    tau: float = 0.4
    beta: float = 1.67
    gamma: float = 3.5
    resolutions: tuple[int, ...] = VALID_RESOLUTIONS
    ensemble: str = "iwpe"
    n_prompts: int = 1
    seed: int = 0
    # ablation switches
    adain: bool = True
    adain_position: str = "pre"
    share_query_step_noise: bool = True
    vicl_attention: bool = True
    q_source: str = "query"
    k_source: str = "prompt_image"


def validate_config(cfg: VICLConfig) -> VICLConfig:
    """Check every invariant; return the config with a normalized resolution set.

    Idempotent: validating an already validated config returns an equal value.
    """
    if not isinstance(cfg.steps, (int, np.integer)) or cfg.steps < 1:
        raise InvalidConfigError("steps", f"must be a positive integer, got {cfg.steps!r}")
    if not (cfg.tau > 0):
        raise InvalidConfigError("tau", f"must be positive, got {cfg.tau!r}")
    if not (cfg.beta >= 0):
        raise InvalidConfigError("beta", f"must be non-negative, got {cfg.beta!r}")
    if not (cfg.gamma >= 0):
        raise InvalidConfigError("gamma", f"must be non-negative, got {cfg.gamma!r}")
    res = tuple(sorted(set(int(r) for r in cfg.resolutions)))
    if not res:
        raise InvalidConfigError("resolutions", "at least one attention resolution is required")
    bad = [r for r in res if r not in VALID_RESOLUTIONS]
    if bad:
        raise InvalidConfigError("resolutions", f"unsupported resolution(s) {bad}, valid: {VALID_RESOLUTIONS}")
    if cfg.ensemble not in ENSEMBLE_MODES:
        raise InvalidConfigError("ensemble", f"must be one of {ENSEMBLE_MODES}, got {cfg.ensemble!r}")
    if not isinstance(cfg.n_prompts, (int, np.integer)) or cfg.n_prompts < 1:
        raise InvalidConfigError("n_prompts", f"must be a positive integer, got {cfg.n_prompts!r}")
    if not isinstance(cfg.seed, (int, np.integer)):
        raise InvalidConfigError("seed", f"must be an integer, got {cfg.seed!r}")
    if cfg.adain_position not in ADAIN_POSITIONS:
        raise InvalidConfigError("adain_position", f"must be one of {ADAIN_POSITIONS}")
    if cfg.q_source not in Q_SOURCES:
        raise InvalidConfigError("q_source", f"must be one of {Q_SOURCES}")
    if cfg.k_source not in K_SOURCES:
        raise InvalidConfigError("k_source", f"must be one of {K_SOURCES}")
    return dataclasses.replace(cfg, steps=int(cfg.steps), n_prompts=int(cfg.n_prompts), seed=int(cfg.seed), resolutions=res)


def parse_config_file(path) -> dict:
    """Read a flat key-value config file (``key = value`` lines, # comments)."""
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError("config-file", f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_FILE_KEYS:
            raise InvalidConfigError(key, f"unknown config key (line {lineno}); valid keys: {CONFIG_FILE_KEYS}")
        values[key] = value
    return values


def config_from_sources(file_values: dict | None = None, overrides: dict | None = None) -> VICLConfig:
    """Merge file values and override values (overrides win) into a validated config."""
    merged: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is not None:
                merged[key] = value
    kwargs = {}
    for key, value in merged.items():
        if key in ("steps", "n_prompts", "seed"):
            kwargs[key] = int(value)
        elif key in ("tau", "beta", "gamma"):
            kwargs[key] = float(value)
        elif key == "resolutions":
            if isinstance(value, str):
                value = [p for p in value.replace(",", " ").split() if p]
            kwargs[key] = tuple(int(v) for v in value)
        elif key == "ensemble":
            kwargs[key] = str(value).lower()
        else:
            kwargs[key] = value
    try:
        cfg = VICLConfig(**kwargs)
    except TypeError as exc:
        raise InvalidConfigError("config", str(exc)) from exc
    return validate_config(cfg)


def config_to_dict(cfg: VICLConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["resolutions"] = list(cfg.resolutions)
    return d


# ---------------------------------------------------------------------------
# image preprocessing: resize shorter side, then center-crop to a square


def _resize_crop_params(height: int, width: int, size: int):
    scale = size / min(height, width)
    new_h = max(size, int(round(height * scale)))
    new_w = max(size, int(round(width * scale)))
    top = (new_h - size) // 2
    left = (new_w - size) // 2
    return scale, new_h, new_w, top, left


def preprocess_image(source, size: int = MODEL_INPUT_SIZE) -> ImageRGB:
    """Resize the shorter side to ``size`` and center-crop to size x size."""
    if isinstance(source, ImageRGB):
        arr = source.pixels
        pil = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    elif isinstance(source, Image.Image):
        pil = source.convert("RGB")
    else:
        arr = np.asarray(source)
        if arr.dtype != np.uint8:
            arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        pil = Image.fromarray(arr).convert("RGB")
    _, new_h, new_w, top, left = _resize_crop_params(pil.height, pil.width, size)
    pil = pil.resize((new_w, new_h), Image.BILINEAR)
    pil = pil.crop((left, top, left + size, top + size))
    return ImageRGB(np.asarray(pil, dtype=np.float32) / 255.0)


def preprocess_labels(ids: np.ndarray, size: int = MODEL_INPUT_SIZE) -> np.ndarray:
    """Apply the image preprocessing geometry to an integer id map (nearest)."""
    ids = np.asarray(ids)
    pil = Image.fromarray(ids.astype(np.int32), mode="I")
    _, new_h, new_w, top, left = _resize_crop_params(ids.shape[0], ids.shape[1], size)
    pil = pil.resize((new_w, new_h), Image.NEAREST)
    pil = pil.crop((left, top, left + size, top + size))
    return np.asarray(pil, dtype=np.int64)


def preprocess_points(points: np.ndarray, orig_hw: tuple[int, int], size: int = MODEL_INPUT_SIZE):
    """Map (x, y) pixel points through the resize + center-crop geometry.

    Returns the transformed points and a boolean mask of points that remain
    inside the cropped canvas.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    scale, _, _, top, left = _resize_crop_params(orig_hw[0], orig_hw[1], size)
    out = pts * scale - np.array([left, top], dtype=np.float64)
    inside = (out[:, 0] >= 0) & (out[:, 0] < size) & (out[:, 1] >= 0) & (out[:, 1] < size)
    return out, inside


def grayscale(img: ImageRGB) -> ImageRGB:
    """Luminance of an image replicated to three channels."""
    lum = img.pixels @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return ImageRGB(np.repeat(lum[:, :, None], 3, axis=2))


def load_image(path, size: int | None = None) -> ImageRGB:
    with Image.open(path) as pil:
        pil = pil.convert("RGB")
        if size is not None:
            return preprocess_image(pil, size)
        return ImageRGB(np.asarray(pil, dtype=np.float32) / 255.0)


def save_image(img: ImageRGB, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = (img.pixels * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def psnr(a: ImageRGB, b: ImageRGB) -> float:
    """Peak signal-to-noise ratio in dB between two images in [0, 1]."""
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))
