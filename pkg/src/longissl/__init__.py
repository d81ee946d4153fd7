"""Spatiotemporal self-supervised pre-training on longitudinal 3D volume sequences."""

__version__ = "0.1.0"
