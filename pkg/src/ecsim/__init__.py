"""Finite-element electroconvection simulator for thin annular films."""

__version__ = "0.1.0"
