"""Latency-aware analysis, rewriting and pruning of pose networks, plus a PAF decoder."""

__version__ = "0.1.0"
