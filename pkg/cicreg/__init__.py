"""Cycle inverse-consistent deformable registration engine and evaluation toolkit."""

__version__ = "0.1.0"
