"""Compound-hazard event generation: GEV margins plus a DCGAN dependence model."""

__version__ = "0.1.0"
