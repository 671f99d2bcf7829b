"""Woodbury-scaled second-order unlearning for ridge regression and small MLPs."""

__version__ = "0.1.0"
