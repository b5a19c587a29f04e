"""Homogenization of stable-like jump processes in random environments."""

__version__ = "0.1.0"
