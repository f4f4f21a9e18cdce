"""Federated answer-selection matcher: shared transformer backbone plus
per-client private patches, trained over simulated heterogeneous clients."""

__version__ = "0.1.0"
