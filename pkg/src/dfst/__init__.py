"""Differentiable finite-state transducers trained on grid-agent trajectories."""

__version__ = "0.1.0"
