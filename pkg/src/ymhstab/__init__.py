"""Numerical verification toolkit for stability of Yang-Mills-Higgs vortex sheets."""

__version__ = "0.1.0"
