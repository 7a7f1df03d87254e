"""Desk-scale security testbed for a distribution-grid control network."""

__version__ = "0.1.0"
