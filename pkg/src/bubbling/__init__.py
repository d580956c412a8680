"""Bubbling solutions of a Liouville-type curvature equation on a flat torus."""

__version__ = "0.1.0"
