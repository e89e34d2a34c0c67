"""Desk-scale diffusion framework for one-shot artistic glyph generation."""

__version__ = "0.1.0"
