"""Few-shot semantic part segmentation from generator activation features."""

__version__ = "0.1.0"
