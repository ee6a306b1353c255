"""Dual-backbone (ViT + Swin) multi-label chest X-ray classifier.

Numpy-backed library with its own reverse-mode autodiff engine, feature
extractors, fusion head, data pipeline, trainer, metrics, and CLI.
"""

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
