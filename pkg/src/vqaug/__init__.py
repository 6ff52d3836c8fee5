"""Discrete-latent tabular data augmentation for imbalanced security classifiers."""

__version__ = "0.1.0"
