"""Bit-flip vulnerability analysis and selective hardening of int8 networks."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
