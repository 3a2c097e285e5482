"""Doubly-reparameterized gradient estimators for hierarchical VAEs."""

__version__ = "0.1.0"
