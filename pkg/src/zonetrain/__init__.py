"""Depth-zoned training of RF patch classifiers (Zone, Regular and Depth-Aware strategies)."""

__version__ = "0.1.0"
