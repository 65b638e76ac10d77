"""Masked invertible networks: triangular-Jacobian flows with exact log-determinants."""

__version__ = "0.1.0"
