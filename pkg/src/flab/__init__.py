"""Numerical verification of generalized Feller semigroups on weighted spaces."""

__version__ = "0.1.0"
