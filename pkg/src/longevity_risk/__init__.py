"""Longevity risk - Lee-Carter stochastic mortality and annuity liability variance."""

__version__ = "0.1.0"
