"""Pixel-wise conformal uncertainty for CBCT to CT synthesis."""
__version__ = "0.1.0"
