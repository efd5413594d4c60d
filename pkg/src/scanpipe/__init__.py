"""Manifest-driven training, selection, ensembling and explanation of volumetric scan classifiers."""

__version__ = "0.1.0"
