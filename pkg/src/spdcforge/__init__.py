"""Simulation and processing toolkit for X-ray down-conversion correlation imaging."""

__version__ = "0.1.0"
