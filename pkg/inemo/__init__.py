"""Incremental neural mesh models at desk scale."""

__version__ = "0.3.0"
