"""Lifelong language learning with a residual VAE adapter, built on a small numpy autodiff core."""

__version__ = "0.1.0"
