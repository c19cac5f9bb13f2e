"""Text-conditioned human-object interaction pose generation on synthetic scenes."""
__version__ = "0.1.0"
