"""Randomization tests for panels with staggered treatment adoption."""

__version__ = "0.1.0"
