"""Tracing cybercrime funds across the Bitcoin transaction graph."""

__version__ = "0.1.0"
