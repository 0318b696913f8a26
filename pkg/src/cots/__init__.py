"""Collaborative two-stream vision-language pre-training at desk scale."""

__version__ = "0.1.0"
