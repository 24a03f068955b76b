"""Generative image coding with a frozen toy diffusion prior."""

__version__ = "0.1.0"
