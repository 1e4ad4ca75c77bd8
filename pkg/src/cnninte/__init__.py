"""Hidden-layer interpretation of a small MNIST CNN via two-level clustering and a meta decision tree."""

__version__ = "0.1.0"
