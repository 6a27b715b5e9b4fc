"""Lift 2D instance masks into a 3D density field and measure organ traits."""

__version__ = "0.1.0"
