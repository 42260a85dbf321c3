"""Attention-based multimodal motion forecasting."""

__version__ = "0.1.0"
