"""Desk-scale multilingual NMT sandbox with composable adapter layers."""

__version__ = "0.1.0"
