"""Review-augmented generative recommendation pipeline."""

__version__ = "0.1.0"
