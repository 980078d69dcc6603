"""Asymmetric zero-shot composed image retrieval on a planted-semantics benchmark.

A light query-side student turns an image into sentence tokens that a frozen
teacher text encoder can read; gallery images are embedded once by the
teacher. See the README for the pipeline and command-line usage.
"""

__version__ = "0.1.0"
