"""Cross-domain masked point-cloud autoencoding with a heterogeneous domain adapter."""

__version__ = "0.1.0"
