"""Layered experiment orchestration against a simulated wireless/edge testbed."""

__version__ = "0.1.0"
