"""Decoherent quench dynamics across a Dirac-point gap closing."""

__version__ = "0.1.0"
