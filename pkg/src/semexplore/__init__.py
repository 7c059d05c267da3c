"""Semantic-aware exploration of simulated indoor scenes."""

__version__ = "0.1.0"
