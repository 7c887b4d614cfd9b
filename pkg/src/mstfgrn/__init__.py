"""Spatio-temporal graph forecasting with learned adjacency and bidirectional graph recurrence."""

__version__ = "0.1.0"
