"""Optimal liquidation with a hidden market regime and price impact."""

__version__ = "0.1.0"
