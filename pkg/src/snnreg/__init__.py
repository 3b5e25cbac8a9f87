"""Spiking U-Net deformable registration engine for small synthetic 3D volumes."""

__version__ = "0.1.0"
