"""Generalized least squares estimation, uncertainty quantification and experimental design."""
__version__ = "0.1.0"
