"""Sparse-coding-driven deep decision tree ensembles for pixel-wise segmentation."""

__version__ = "0.1.0"
