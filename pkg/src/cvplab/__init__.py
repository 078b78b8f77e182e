"""Certainty volume prediction on toy domain-shift problems."""

__version__ = "0.1.0"
