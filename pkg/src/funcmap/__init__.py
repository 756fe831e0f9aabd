"""Functional channel embeddings and masked-region reconstruction on synthetic LFP."""

__version__ = "0.1.0"
