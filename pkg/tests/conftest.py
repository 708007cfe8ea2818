import numpy as np
import pytest
from scipy.ndimage import zoom

from diffvicl.backends.stub import StubDenoiser
from diffvicl.core import ImageRGB


def smooth_image(size: int, seed: int = 0) -> ImageRGB:
    """A smooth random image (low-frequency content survives the stub codec)."""
    rng = np.random.default_rng(seed)
    coarse = rng.random((8, 8, 3)).astype(np.float32)
    up = zoom(coarse, (size / 8, size / 8, 1), order=1)
    return ImageRGB(np.clip(up[:size, :size], 0.0, 1.0))


@pytest.fixture
def small_backend() -> StubDenoiser:
    """Latent 16, one 16x16 attention site, 50 base timesteps."""
    return StubDenoiser(latent_size=16, base_timesteps=50)


@pytest.fixture
def tiny_backend() -> StubDenoiser:
    """Latent 8, no attention sites; fastest backend for inversion math."""
    return StubDenoiser(latent_size=8, base_timesteps=40)


@pytest.fixture
def image_factory():
    def make(seed: int = 0, size: int = 128) -> ImageRGB:
        return smooth_image(size, seed)

    return make
