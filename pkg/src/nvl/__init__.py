"""Noise-robust speaker verification lab.

A mask-based speech enhancer and a TDNN speaker embedder trained jointly
with a perceptual loss plus cross entropy, on a deterministic synthetic
corpus, with EER/minDCF verification scoring.
"""

from .config import ConfigError, RunConfig
from .tensor import DomainError, GraphError, ShapeError, Tensor, no_grad

__all__ = [
    "ConfigError",
    "DomainError",
    "GraphError",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "no_grad",
]

__version__ = "0.1.0"
