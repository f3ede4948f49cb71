"""binorm - binary normalized neural networks with a bit-packed runtime."""

__version__ = "0.1.0"
