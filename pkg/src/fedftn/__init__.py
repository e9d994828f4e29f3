"""Personalized federated low-count volume denoising with feature transformation networks."""
__version__ = "0.1.0"
