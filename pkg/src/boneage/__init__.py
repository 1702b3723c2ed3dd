"""Divide-and-conquer hand bone-age estimation."""

__version__ = "0.1.0"
