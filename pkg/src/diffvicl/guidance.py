"""Noise-prediction blending and latent statistics alignment.

``swap_guide`` mixes the prediction path's default and recomputed noise
predictions with a weight that grows linearly as denoising progresses, in
the style of classifier-free guidance. ``adain`` rewrites a latent's
per-channel moments to match a target latent, aligning the prediction's
color statistics with the prompt-target space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Latent
from .errors import DegenerateStatisticsError, DimensionError

SOURCE_DEFAULT = "default"
SOURCE_MODIFIED = "modified"
SOURCE_COMBINED = "combined"

_SIGMA_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class NoisePrediction:
    """A denoiser output: tensor shaped like the latent it updates."""

    eta: np.ndarray
    source: str = SOURCE_DEFAULT
    timestep: int | None = None

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float32)
        if not np.all(np.isfinite(eta)):
            raise ValueError("noise prediction contains non-finite values")
        if self.source not in (SOURCE_DEFAULT, SOURCE_MODIFIED, SOURCE_COMBINED):
            raise ValueError(f"unknown source {self.source!r}")
        object.__setattr__(self, "eta", eta)


def blend_factor(t: int, T: int, gamma: float) -> float:
    """Mixing weight gamma * (T - t) / T; zero at the first step t = T."""
    if not (1 <= t <= T):
        raise ValueError(f"step position t={t} outside [1, {T}]")
    return float(gamma) * float(T - t) / float(T)


def swap_guide(
    eta_default: NoisePrediction, eta_modified: NoisePrediction, t: int, T: int, gamma: float
) -> NoisePrediction:
    """Blend default and recomputed noise predictions at step position t.

    The combined prediction is the default one plus ``gamma (T - t) / T``
    times the difference, so the recomputed signal is phased in gradually:
    nothing at t = T, strongest at t = 1. For gamma = 0 or identical inputs
    the default prediction is returned exactly.
    """
    if eta_default.eta.shape != eta_modified.eta.shape:
        raise DimensionError(
            f"default {eta_default.eta.shape} vs modified {eta_modified.eta.shape}"
        )
    w = blend_factor(t, T, gamma)
    if w == 0.0:
        combined = eta_default.eta.copy()
    else:
        combined = eta_default.eta + np.float32(w) * (eta_modified.eta - eta_default.eta)
    return NoisePrediction(combined, source=SOURCE_COMBINED, timestep=eta_default.timestep)


def channel_moments(values: np.ndarray):
    """Per-channel mean and standard deviation over spatial positions."""
    v = np.asarray(values)
    mean = v.mean(axis=(1, 2), keepdims=True)
    std = v.std(axis=(1, 2), keepdims=True)
    return mean, std


def adain(z_d: Latent, z_b: Latent, on_degenerate: str = "raise") -> Latent:
    """Re-normalize z_d's per-channel moments to match z_b's.

    Statistics are taken per channel over spatial positions. A channel of
    z_d with zero spread cannot be normalized; by default that raises
    DegenerateStatisticsError naming the channels, and with
    ``on_degenerate="identity"`` the affected channels pass through
    unchanged instead.
    """
    if z_d.values.shape != z_b.values.shape:
        raise DimensionError(f"latent shapes differ: {z_d.values.shape} vs {z_b.values.shape}")
    if on_degenerate not in ("raise", "identity"):
        raise ValueError(f"on_degenerate must be 'raise' or 'identity', got {on_degenerate!r}")
    mean_d, std_d = channel_moments(z_d.values)
    mean_b, std_b = channel_moments(z_b.values)
    degenerate = std_d[:, 0, 0] <= _SIGMA_FLOOR
    if degenerate.any() and on_degenerate == "raise":
        raise DegenerateStatisticsError(np.nonzero(degenerate)[0])
    safe_std = np.where(degenerate[:, None, None], 1.0, std_d)
    out = (z_d.values - mean_d) / safe_std * std_b + mean_b
    if degenerate.any():
        out = np.where(degenerate[:, None, None], z_d.values, out)
    return Latent(out.astype(np.float32), timestep_tag=z_d.timestep_tag)
