"""Bivariate SPDE Gaussian random fields for the two surfaces of thin printed walls."""

__version__ = "0.1.0"
