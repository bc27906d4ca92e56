"""Equilibrium-informed neural networks (EINN) for saddle-node threshold detection."""

__version__ = "0.1.0"
