"""Heterogeneous load balancing: rate-surface models, capacity LPs, policies and a CTMC simulator."""

__version__ = "0.1.0"
