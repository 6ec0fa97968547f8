"""Energy-per-bit achievability bounds for the many-user AWGN and
quasi-static fading MACs from spatially coupled scalar AMP."""

__version__ = "0.1.0"
