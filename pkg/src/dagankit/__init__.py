"""Depth-aware talking-head generation components, verified on synthetic scenes."""

__version__ = "0.1.0"
