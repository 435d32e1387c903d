"""Hybrid-attention graph convolutional network for skeleton-based action
recognition: pure-numpy reference implementation with reverse-mode autodiff,
training, evaluation and serialization tooling."""

__version__ = "0.1.0"
