"""Diffeomorphic aging model built from cross-sectional age-specific templates."""

__version__ = "0.1.0"
