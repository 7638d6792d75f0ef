"""Variational denoising network: blind denoising with per-pixel noise variance estimation."""

__version__ = "0.1.0"
