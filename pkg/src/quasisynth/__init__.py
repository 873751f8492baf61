"""Mask-guided one-shot image synthesis by inverting a quasi-robust classifier."""

__version__ = "0.1.0"
