"""4D spatio-temporal convolutional networks for volumetric sequence regression."""

__version__ = "0.1.0"
