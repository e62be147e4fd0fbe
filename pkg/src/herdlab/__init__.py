"""Controlled herd/herder particle systems: simulation, mean-field checks and control optimization."""

__version__ = "0.1.0"
