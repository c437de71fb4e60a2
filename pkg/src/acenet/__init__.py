"""Encoder-decoder segmentation network with ASPP context modeling,
multi-source aggregation and deep supervision, built on a minimal
reverse-mode autodiff tensor engine."""

__version__ = "0.1.0"
