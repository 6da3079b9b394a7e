"""Crack inspection toolkit: synthetic height-varying illumination, patch
datasets, a baseline patch classifier, sliding-window detection and
patch/tile level metrics."""

__version__ = "0.1.0"
