"""Hierarchical lane-map generation: data model, preprocessing, models and metrics."""

__version__ = "0.1.0"
