"""Continual-learning channel prediction with EWC and SI regularization."""

__version__ = "0.1.0"
