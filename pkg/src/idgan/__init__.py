"""Two-stage disentangled synthesis: VAE representation learning followed by
information-distilled GAN training, with baselines and evaluation metrics."""

__version__ = "0.1.0"
