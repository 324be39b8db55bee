"""Organ-disease graph construction and report generation on synthetic studies."""

__version__ = "0.1.0"
