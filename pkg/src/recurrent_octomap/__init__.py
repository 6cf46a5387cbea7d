"""Semantic voxel mapping with recurrent per-cell state fusion."""

__version__ = "0.1.0"
