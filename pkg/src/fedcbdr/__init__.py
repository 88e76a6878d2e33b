"""Federated class-incremental learning with globally balanced leverage-score replay."""

__version__ = "0.1.0"
