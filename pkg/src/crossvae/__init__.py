"""Variational Bayesian matrix factorization with cross-fed embeddings."""

__version__ = "0.1.0"
