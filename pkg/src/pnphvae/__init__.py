"""Image restoration with hierarchical VAE priors by plug-and-play splitting."""

__version__ = "0.1.0"
