"""Gated positional self-attention and a small ConViT, on a numpy autodiff core."""

__version__ = "0.1.0"
