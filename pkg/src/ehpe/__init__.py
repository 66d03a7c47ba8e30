"""Segmented two-stage hand pose estimation."""
__version__ = "0.1.0"
