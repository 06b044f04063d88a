"""Fusion, step-wise alignment and twin contrastive training for audio captioning."""

__version__ = "0.1.0"
