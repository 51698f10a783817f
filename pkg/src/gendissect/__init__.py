"""Dissection, causal intervention, and artifact diagnosis for small image generators."""

__version__ = "0.1.0"
