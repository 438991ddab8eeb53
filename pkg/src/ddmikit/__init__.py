"""Domain-agnostic latent diffusion over implicit neural representations, at desk scale."""

__version__ = "0.1.0"
