"""Accent/speaker disentangled multilingual TTS toolkit at desk scale."""

__version__ = "0.1.0"
