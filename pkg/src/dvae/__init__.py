"""Disentanglement toolkit: beta-VAE / TC-VAE training on embedding vectors,
unsupervised (EER, WSEPIN) and supervised (DCI) metrics, and LDA proxy ranking."""

__version__ = "0.1.0"
