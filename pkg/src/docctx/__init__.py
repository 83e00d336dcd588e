"""Desk-scale document-level translation toolkit with context-usage diagnostics."""

__version__ = "0.1.0"
