"""Multimodal VAEs with mixture-of-products-of-experts posteriors.

Subpackages cover a small autodiff tensor core, diagonal-Gaussian
machinery, subset enumeration and product-of-experts fusion, MLP
encoder/decoder stores, the family of multimodal ELBO objectives, an
exact linear-Gaussian verification oracle, a synthetic-data experiment
harness, and a CLI that ties them together.
"""

__version__ = "0.1.0"
