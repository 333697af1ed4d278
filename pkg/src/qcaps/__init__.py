"""Quaternion capsule networks on a self-contained numpy stack."""

__version__ = "0.1.0"
