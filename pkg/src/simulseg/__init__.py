"""Simultaneous sequence generation with latent segments as the source-target pivot."""

__version__ = "0.1.0"
