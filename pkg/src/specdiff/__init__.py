"""specdiff: train and validate diffusion models on corrupted spectral measurements."""

__version__ = "0.1.0"
