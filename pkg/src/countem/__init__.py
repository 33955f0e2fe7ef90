"""Onset transcription trained from per-window note-count histograms via EM."""

__version__ = "0.1.0"
