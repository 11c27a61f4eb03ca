"""Surrogate-accelerated closed-loop optimization of geothermal production."""
__version__ = "0.1.0"
