"""Differentiable multi-view image renderer with per-view feature aggregation."""

__version__ = "0.1.0"
