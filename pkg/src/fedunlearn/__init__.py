"""Attribute unlearning for user-level federated recommendation, with
gradient-leakage attacks against the adversarial classifier."""

__version__ = "0.1.0"
