"""Contextual biasing for toy neural transducers, with guided-attention losses."""

__version__ = "0.1.0"
