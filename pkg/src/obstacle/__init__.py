"""Finite-difference solvers and regularity diagnostics for bilateral obstacle problems."""

__version__ = "0.1.0"
