"""Simulation of longitudinal survival data compatible with a marginal structural model."""

__version__ = "0.1.0"
