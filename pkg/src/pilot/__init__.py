"""Probabilistic sound event localization with a differentiable linear-Gaussian output stage."""

__version__ = "0.1.0"
