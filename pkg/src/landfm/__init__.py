"""Attribute-based spatiotemporal masked-autoencoder for land-surface prediction.

Numerics run on a small float64 reverse-mode autodiff engine (``landfm.autodiff``);
everything above it (embedding, group masking, encoder/decoder, fine-tuning
heads, the differentiable bucket hybrid and the metric suite) is plain numpy.
"""

__version__ = "0.1.0"
