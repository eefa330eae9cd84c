"""MobileViT blocks, models, multi-scale sampler and verification tools on a numpy core."""

__version__ = "0.1.0"
