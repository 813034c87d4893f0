"""Attention focusing for generalized category discovery on a desk-scale ViT."""

__version__ = "0.1.0"
