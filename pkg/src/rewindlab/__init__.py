"""Magnitude pruning with fine-tuning, weight rewinding and learning-rate rewinding."""

__version__ = "0.1.0"
