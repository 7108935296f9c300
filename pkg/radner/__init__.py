"""Radner equilibria with endogenously complete markets in diffusion economies."""

__version__ = "0.1.0"
