"""Speech gap filling by in-painting normalized mel-spectrograms."""

__version__ = "0.1.0"
