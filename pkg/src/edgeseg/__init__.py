"""Edge-aware transformer for scene text segmentation."""

__version__ = "0.1.0"
