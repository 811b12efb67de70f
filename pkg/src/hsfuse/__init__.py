"""Unsupervised hyperspectral super-resolution with coupled unmixing networks."""

__version__ = "0.1.0"
