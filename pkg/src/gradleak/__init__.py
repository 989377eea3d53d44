"""Gradient leakage attacks and defenses in a simulated federated setting."""

__version__ = "0.1.0"
