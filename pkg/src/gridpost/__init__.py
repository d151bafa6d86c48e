"""Ensemble forecast post-processing with learned spatial-field encodings."""

__version__ = "0.1.0"
