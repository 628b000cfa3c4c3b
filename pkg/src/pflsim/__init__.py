"""Personalized federated learning backdoor simulator."""

__version__ = "0.1.0"
