"""Camera-prior and LiDAR fusion 3D detector at desk scale, with its geometry, losses and metrics."""

__version__ = "0.1.0"
