"""Unified multi-task perception encoder at desk scale."""

__version__ = "0.1.0"
