"""Federated black-box prompt tuning with zeroth-order optimizers."""

__version__ = "0.1.0"
