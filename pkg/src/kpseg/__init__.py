"""Semantic segmentation of point clouds with stacked kernel point convolutions, in NumPy."""

__version__ = "0.1.0"
