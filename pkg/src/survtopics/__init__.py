"""Survival-supervised, guide-prior topic models for multi-modal clinical count data."""

__version__ = "0.1.0"
