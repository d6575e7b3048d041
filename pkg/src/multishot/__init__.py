"""Desk-scale multi-shot video generation with a dual-level conditioning cache."""

__version__ = "0.1.0"
