"""Spoofing-aware speaker verification back-ends on precomputed embeddings."""

__version__ = "0.1.0"
