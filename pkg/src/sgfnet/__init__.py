"""Spectral-aware global fusion (SGF) for RGB-thermal semantic segmentation."""

__version__ = "0.1.0"
