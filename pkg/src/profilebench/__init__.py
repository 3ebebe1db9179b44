"""Benchmark construction and scoring for streaming user-interest prediction."""

__version__ = "0.1.0"
