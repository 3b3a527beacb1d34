"""Numerical toolkit for exterior billiards, grazing singularities and mild kinetic solutions."""

__version__ = "0.1.0"
