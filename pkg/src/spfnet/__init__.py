"""Spatially-preserving flattening for multilabel image classifiers.

Each backbone feature map is compressed by a small convolutional autoencoder
and the per-map codes are concatenated in channel order, in place of the usual
pooling-then-flatten step.
"""

__version__ = "0.1.0"
