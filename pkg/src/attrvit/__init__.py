"""Attribute-guided vision transformer with bounded attention.

A small numpy library for training a patch transformer from image-level
labels only. The encoder uses L2-normalized attention, an attribute head
gates the feature grid into complementary spatial groups, and a siamese
consistency objective regularizes the gates so that class activation
maps localize objects. Everything runs in float64 on a from-scratch
reverse-mode tape.
"""

from .tensor import Tensor, Tape, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "grad_check", "__version__"]
