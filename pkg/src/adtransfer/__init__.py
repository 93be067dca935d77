"""Similarity-based hybrid transfer for offline ads-allocation agents."""

__version__ = "0.1.0"
