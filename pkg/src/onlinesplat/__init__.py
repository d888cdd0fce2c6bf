"""Online 3D Gaussian splatting mapping with uncertainty-driven view selection."""

__version__ = "0.1.0"
