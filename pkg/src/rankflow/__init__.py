"""Rank-based competing Brownian particles: rates, simulation and statistical checks."""

__version__ = "0.1.0"
