"""Frequency-domain blurring-diffusion image codec with a checkerboard/channel/attention entropy model."""

__version__ = "0.1.0"
