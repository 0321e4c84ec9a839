"""Lung cropping, resampling, fold construction, ensembling and
pseudo-labeling for CT-scan COVID-19 classification."""

__version__ = "0.1.0"
