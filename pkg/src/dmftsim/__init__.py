"""Simulation, DMFT integration, long-time fixed points, and AMP cross-checks
for spectral-initialized gradient descent on single index models."""

__version__ = "0.1.0"
