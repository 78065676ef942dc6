"""One-shot 6D object pose estimation by dense image-to-object matching."""

__version__ = "0.1.0"
