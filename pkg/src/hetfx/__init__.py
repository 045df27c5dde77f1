"""Heterogeneous treatment effects with honest causal forests on clustered data."""

__version__ = "0.1.0"
