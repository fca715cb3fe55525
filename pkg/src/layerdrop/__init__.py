"""Structured layer dropout for transformer LMs, with inference-time pruning.

A small numpy autodiff core drives a post-norm decoder-only transformer.
Training samples group masks (whole layers, sub-layers, heads, FFN blocks or
single weights) each step; at inference the network can be cut to any depth
with :mod:`layerdrop.prune`.
"""

__version__ = "0.1.0"
