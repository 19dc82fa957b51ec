"""Overlapping Schwarz preconditioners for the CAP Helmholtz problem."""

__version__ = "0.1.0"
