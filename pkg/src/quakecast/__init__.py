"""Spatiotemporal earthquake forecasting on gridded log-energy series."""

__version__ = "0.1.0"
