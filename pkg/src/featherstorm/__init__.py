"""Feature-importance transfer attacks with spatial block mixing and spectral self-mixing."""

__version__ = "0.1.0"
