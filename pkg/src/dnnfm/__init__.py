"""Covariance and precision estimation from neural-network factor models."""

__version__ = "0.1.0"
