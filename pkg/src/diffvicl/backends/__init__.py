"""Model backends: the deterministic stub plus lazy adapters for real models."""

from .stub import StubDenoiser

__all__ = ["StubDenoiser"]
