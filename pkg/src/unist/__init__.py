"""Unified image/video style transfer with axial attention, built on a small autodiff engine."""

__version__ = "0.1.0"
