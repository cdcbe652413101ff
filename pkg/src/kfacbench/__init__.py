"""Batch-size scaling benchmark for SGD and K-FAC on small synthetic problems."""

__version__ = "0.1.0"
