"""Impartial training for heterogeneous and multimodal VAEs."""
__version__ = "0.1.0"
