"""Masked feature imitation for distilling anchor-based detectors."""
__version__ = "0.1.0"
