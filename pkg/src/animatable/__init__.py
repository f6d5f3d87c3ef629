"""Category-level animatable 3D models reconstructed from video observations."""

__version__ = "0.1.0"
