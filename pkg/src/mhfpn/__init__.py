"""Numpy-only detection micro-framework comparing feature-pyramid necks (FPN, PANet, HRFPN, MHFPN)."""

__version__ = "0.1.0"
