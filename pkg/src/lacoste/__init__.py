"""Stereo-temporal query-based segmentation on synthetic stereo video."""

__version__ = "0.1.0"
