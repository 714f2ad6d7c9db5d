"""Contrastive caption and image consistency for text-to-image GANs at desk scale."""

__version__ = "0.1.0"
