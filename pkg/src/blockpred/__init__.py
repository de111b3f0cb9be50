"""LiDAR-aided prediction of human blockage on indoor radio links."""

__version__ = "0.1.0"
