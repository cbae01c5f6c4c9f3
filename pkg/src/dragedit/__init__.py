"""Drag-style video editing engine with a desk-scale diffusion backbone."""

__version__ = "0.1.0"
