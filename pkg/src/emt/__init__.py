"""Efficient meta-tuning of content-aware super-resolution models for video delivery."""

__version__ = "0.1.0"
