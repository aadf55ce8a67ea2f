"""Desk-scale laboratory for adversarial robustness of camera+LiDAR fusion detectors."""

__version__ = "0.1.0"
