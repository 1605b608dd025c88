"""Benchmark harness for review-aware rating prediction."""

__version__ = "0.1.0"
