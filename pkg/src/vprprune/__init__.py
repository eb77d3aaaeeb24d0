"""Structured pruning and resource evaluation for small VPR models."""

__version__ = "0.1.0"
