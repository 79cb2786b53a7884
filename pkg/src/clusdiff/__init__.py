"""Clustering-conditioned diffusion for image generation at desk scale."""

__version__ = "0.1.0"
