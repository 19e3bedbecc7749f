"""Discrete diffusion with multi-index absorbing states (mask rehashing)."""

__version__ = "0.1.0"
