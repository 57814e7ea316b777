"""Contrastive-generative audio-visual synchronization at desk scale."""

__version__ = "0.1.0"
