"""Flood depth estimation from street photos, grounded in a reference-object knowledge graph."""

__version__ = "0.1.0"
