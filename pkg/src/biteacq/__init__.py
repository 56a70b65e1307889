"""Desk-scale bite acquisition: success-rate regression, plate perception, trial statistics and plate simulation."""

__version__ = "0.1.0"
