"""Desk-scale joint text/knowledge-graph encoder pretraining toolkit."""

__version__ = "0.1.0"
