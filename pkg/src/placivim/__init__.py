"""Anatomically guided motion correction and Bayesian IVIM fitting on phantoms."""

__version__ = "0.1.0"
