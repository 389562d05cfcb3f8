"""Thermal-management loop configuration study toolkit."""

__version__ = "0.1.0"
