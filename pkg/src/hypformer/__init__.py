"""Hyperbolic Transformer layers on the Lorentz model."""
__version__ = "0.1.0"
