"""Graded-relevance embedding training with the BiXSE loss, at toy scale."""

__version__ = "0.1.0"
