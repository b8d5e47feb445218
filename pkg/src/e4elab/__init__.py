"""Desk-scale toolkit for training and evaluating e4e-style encoders on a toy style generator."""

__version__ = "0.1.0"
