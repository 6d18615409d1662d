"""Numerical core of an anchor-free center/scale pedestrian detector."""

__version__ = "0.1.0"
