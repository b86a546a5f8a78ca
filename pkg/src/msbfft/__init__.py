"""Multi-setup Bayesian FFT modal identification."""

__version__ = "0.1.0"
