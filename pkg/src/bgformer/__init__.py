"""Bipartite cell-to-anchor graph attention clustering for scRNA-seq counts."""

__version__ = "0.1.0"
