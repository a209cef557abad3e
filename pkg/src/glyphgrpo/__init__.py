"""Toy GRPO training engine for discrete autoregressive glyph-grid generation."""

__version__ = "0.1.0"
