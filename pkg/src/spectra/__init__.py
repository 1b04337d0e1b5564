"""Scalable permutation-free multi-agent Q-learning framework."""

__version__ = "0.1.0"
