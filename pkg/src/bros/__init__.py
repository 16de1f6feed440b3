"""Randomized-subspace single-loop bilevel optimization with bi-probe HVP correction."""

__version__ = "0.1.0"
