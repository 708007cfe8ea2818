"""Training-free visual in-context learning on a latent diffusion backbone.

A pretrained denoiser is repurposed at inference time: the query image and
prompt image/target pairs are inverted to noise space and denoised in
parallel, while the prediction path's decoder self-attention is recomputed
from the query's queries, prompt keys, and prompt-target values. No weights
are updated anywhere.
"""

from .core import (
    DenoiseSchedule,
    ImageRGB,
    Latent,
    PathId,
    VICLConfig,
    make_schedule,
    schedule_for_backend,
    validate_config,
)
from .pipeline import PromptEpisode, run_episode

__version__ = "0.1.0"

__all__ = [
    "DenoiseSchedule",
    "ImageRGB",
    "Latent",
    "PathId",
    "PromptEpisode",
    "VICLConfig",
    "make_schedule",
    "run_episode",
    "schedule_for_backend",
    "validate_config",
    "__version__",
]
