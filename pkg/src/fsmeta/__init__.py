"""Episodic metric learning for few-shot scene classification."""

__version__ = "0.1.0"
