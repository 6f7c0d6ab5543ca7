"""Weak-supervision segmentation lab: soft labels from noisy grid annotations
and noise-robust active-passive losses."""

__version__ = "0.1.0"
