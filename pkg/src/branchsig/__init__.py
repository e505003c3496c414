"""Signature-kernel collocation solvers for ODEs driven by an observed forcing path."""

__version__ = "0.1.0"
