"""Desk-scale retrieve-then-predict language model laboratory."""

__version__ = "0.1.0"
