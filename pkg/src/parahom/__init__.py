"""Numerical periodic homogenization of higher-order parabolic systems."""

__version__ = "0.1.0"
