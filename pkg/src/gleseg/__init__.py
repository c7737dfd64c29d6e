"""Generative latent-space enhancement for promptable segmentation on degraded images."""

__version__ = "0.1.0"
