"""Federated-unlearning privacy laboratory."""

__version__ = "0.1.0"
