"""Privileged knowledge transfer from EDA to low-cost wearable sensors."""

__version__ = "0.1.0"
