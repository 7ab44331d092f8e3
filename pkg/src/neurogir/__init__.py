"""Volumetric neuron segmentation with graph reasoning and a skeleton-aware loss."""

__version__ = "0.1.0"
