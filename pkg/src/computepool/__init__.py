"""Deterministic simulator for a tokenized decentralized compute network."""

__version__ = "0.1.0"
