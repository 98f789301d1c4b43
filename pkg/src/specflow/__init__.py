"""Trajectory anomaly detection with conditional flow matching on a PCA manifold."""

__version__ = "0.1.0"
