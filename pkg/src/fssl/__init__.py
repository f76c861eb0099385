"""Federated semi-supervised traffic classification on sampled subflows."""

__version__ = "0.1.0"
