"""LatentMark - inference-time watermark optimization for deterministic diffusion sampling."""

__version__ = "0.1.0"
