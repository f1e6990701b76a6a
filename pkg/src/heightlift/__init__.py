"""Roadside monocular 3D detection via height-based BEV lifting."""

__version__ = "0.1.0"
