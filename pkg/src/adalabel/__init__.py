"""Adaptive label smoothing toolkit for small-scale seq2seq dialogue training.

Kept import-light on purpose: the CLI caps BLAS threads via environment
variables before any numpy-backed submodule loads.
"""

__version__ = "0.1.0"
