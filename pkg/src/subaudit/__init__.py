"""Auditing DP-SGD under substitute adjacency with crafted canaries."""

__version__ = '0.1.0'
