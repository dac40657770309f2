"""Functional Hungarian (KMT) coupling for independent, non-identically
distributed summands, with Monte Carlo checks of its exponential bounds."""

__version__ = "0.1.0"

from .laws import LatticeGaussianMixture, LawError  # noqa: E402,F401
