"""Streaming speech-to-text translation with wait tokens, at desk scale."""

__version__ = "0.1.0"
