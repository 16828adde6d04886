"""Desk-scale deterministic training engine for enlarge-and-prune experiments."""

__version__ = "0.1.0"
