"""Forced-oscillation workbench for AI-datacenter power fluctuations."""

__version__ = "0.1.0"
