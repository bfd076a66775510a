"""Latent-conditioned neural radiance fields for car instances."""

__version__ = "0.1.0"
