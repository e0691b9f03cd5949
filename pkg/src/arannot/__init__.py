"""Automatic annotation of axoplasmic reticula in anisotropic EM image stacks."""

__version__ = "0.1.0"
