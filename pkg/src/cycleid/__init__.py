"""Cyclic weight-shared encoder-decoder GAN learning pose-invariant
identity latents, with a procedural glyph dataset and evaluation suite."""

__version__ = "0.1.0"
