"""Numerical lab for the self-dual abelian Yang-Mills-Higgs functional on closed surfaces."""

__version__ = "0.1.0"
