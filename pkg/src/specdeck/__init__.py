"""Speculative decoding for video language models, simulated with table-driven models."""

__version__ = "0.1.0"
