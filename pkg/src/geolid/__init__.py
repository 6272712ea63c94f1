"""Geolocation-conditioned spoken language identification, desk scale."""

__version__ = "0.1.0"
