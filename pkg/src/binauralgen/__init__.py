"""Mono-to-binaural audio generation with visual guidance and multi-task learning."""

__version__ = "0.1.0"
