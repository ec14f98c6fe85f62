"""Bathymetry estimation from flow velocities by inversion in the latent
space of a learned reduced-order model."""

__version__ = "0.1.0"
