"""Image-based statistical shape models for volumetric shape completion."""

__version__ = "0.1.0"
