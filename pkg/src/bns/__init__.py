"""Bespoke non-stationary solvers for sampling diffusion and flow models."""

__version__ = "0.1.0"
