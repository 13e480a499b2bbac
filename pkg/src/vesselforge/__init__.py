"""Offline elastic augmentation of vessel-tree masks for LVO classification."""

__version__ = "0.1.0"
