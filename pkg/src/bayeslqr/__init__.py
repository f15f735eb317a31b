"""Probabilistically robust LQR synthesis for linearized Gaussian-process models."""

__version__ = "0.1.0"
