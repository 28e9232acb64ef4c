"""Periodic unfolding, extension operators and two-scale homogenization."""

__version__ = "0.1.0"
