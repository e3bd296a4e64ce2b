"""Conditional diffusion scenarios for factor-driven portfolio construction."""

__version__ = "0.1.0"
