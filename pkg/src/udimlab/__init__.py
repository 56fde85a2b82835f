"""Desk-scale laboratory for unknown-domain inconsistency minimization."""

__version__ = "0.1.0"
