"""Class-prompted segmentation with a diffusion prompt encoder, at desk scale."""

__version__ = "0.1.0"
