"""Desk-scale toolkit for training and evaluating small embedding models."""

__version__ = "0.1.0"
