"""On-device style personalization of a compact CTC speech recognizer."""

__version__ = "0.1.0"
