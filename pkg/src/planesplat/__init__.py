"""Plane instance parsing of 3D Gaussian splatting fields."""
__version__ = "0.1.0"
