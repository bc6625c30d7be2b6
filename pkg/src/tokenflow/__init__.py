"""Budgeted token-routing multi-modal transformer and mmWave V2I scene simulator."""

__version__ = "0.1.0"
