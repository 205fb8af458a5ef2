"""Tiered KV cache engine for paged-attention inference, with a simulated engine."""

__version__ = "0.1.0"
