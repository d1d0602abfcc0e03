"""Desk-scale audio-visual speaker diarization laboratory."""

__version__ = "0.1.0"
