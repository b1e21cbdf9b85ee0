"""Topology optimization of natural-convection heat sinks with a Darcy-Boussinesq model."""

__version__ = "0.1.0"
