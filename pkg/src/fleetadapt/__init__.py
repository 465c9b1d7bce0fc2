"""Cross-vehicle kinodynamics adaptation through a shared mobility latent space."""

__version__ = "0.1.0"
