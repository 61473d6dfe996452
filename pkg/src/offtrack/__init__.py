"""Offline tracklet re-identification and occluded track completion."""

__version__ = "0.1.0"
