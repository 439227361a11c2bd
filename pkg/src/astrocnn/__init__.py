"""Astronomical image deconvolution with small convolutional networks and classical solvers."""

__version__ = "0.1.0"
