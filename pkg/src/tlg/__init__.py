"""Heterogeneous support/query few-shot segmentation under weak supervision."""

__version__ = "0.1.0"
