"""Federated zeroth-order fine-tuning (FedMeZO) simulator with executable convergence theory."""

__version__ = "0.1.0"
