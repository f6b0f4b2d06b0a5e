"""Structured variational autoencoders with a linear-Gaussian dynamical prior."""

__version__ = "0.1.0"
