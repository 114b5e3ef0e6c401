"""Self-supervised pre-training and evaluation for 3D volumetric brain images."""

__version__ = "0.1.0"
