"""Associative latent disentanglement (quantized scalar codebooks with
softmax retrieval) trained jointly with soft actor-critic from pixels."""

__version__ = "0.1.0"
