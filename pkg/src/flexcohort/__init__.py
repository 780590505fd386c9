"""Flexible versus fixed observation-window cohorts over longitudinal administrative data."""
__version__ = "0.1.0"
