"""Shifts of orbits and cycles of flows and maps under perturbation."""

__version__ = "0.1.0"
