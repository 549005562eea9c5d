"""Multilevel Monte Carlo for the stochastic drift-diffusion-Poisson system."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
