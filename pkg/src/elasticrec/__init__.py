"""Elastic item embeddings for memory-budgeted on-device recommendation."""
__version__ = "0.1.0"
