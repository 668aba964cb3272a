"""Semi-supervised semantic segmentation of aerial tiles with multi-task networks."""

__version__ = "0.1.0"
