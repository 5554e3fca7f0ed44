"""Tied low-rank adapters on a tiny frozen decoder-only transformer."""

__version__ = "0.1.0"
