"""Numerical laboratory for commutator estimates, conservation and renormalisation defects."""

__version__ = "0.1.0"
