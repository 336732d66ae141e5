"""Cauchy-Schwarz regularized autoencoders."""

__version__ = "0.1.0"
