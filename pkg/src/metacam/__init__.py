"""Unsupervised re-identification training with DSCE loss and camera-aware
meta-optimization, at desk scale on synthetic multi-camera data."""

__version__ = "0.1.0"
