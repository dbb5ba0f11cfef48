"""Cascaded try-on diffusion with a two-stream (person / garment) UNet denoiser."""

__version__ = "0.1.0"
