"""Desk-scale laboratory for active pointly-supervised instance segmentation."""

__version__ = "0.1.0"
