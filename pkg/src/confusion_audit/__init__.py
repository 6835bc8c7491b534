"""Audit reinforcement-learning policies for reliance on spurious feature correlations."""

__version__ = "0.1.0"
