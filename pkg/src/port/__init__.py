"""Span-based video temporal grounding with positional recovery training."""

__version__ = "0.1.0"
