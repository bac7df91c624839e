"""Federated edge learning simulator with a signed hash-chain round ledger."""

__version__ = "0.1.0"
