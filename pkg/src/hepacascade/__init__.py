"""Hybrid cascaded liver and liver-lesion segmentation."""

__version__ = "0.1.0"
