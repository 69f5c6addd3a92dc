"""Collusive, dynamic pedestrian patch attacks on a desk-scale driving stack."""

__version__ = "0.1.0"
