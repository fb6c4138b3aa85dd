"""Virtualized process controller clusters with zero-downtime handover."""

__version__ = "0.1.0"
