"""Spatio-temporal graph attention pipeline for predicting post-disaster
commercial land-use change at census-block scale."""

__version__ = "0.1.0"
