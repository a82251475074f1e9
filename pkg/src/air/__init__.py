"""Gated-adapter fine-tuning of a small frozen autoregressive token decoder
into a condition-aware inpainting model, with the surrounding training,
masking, symbolic-conditioning, and evaluation machinery."""

__version__ = "0.1.0"
