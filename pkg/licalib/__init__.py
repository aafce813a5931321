"""Observability-aware LiDAR-IMU calibration toolkit."""

__version__ = "0.1.0"
