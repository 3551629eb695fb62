"""Isogeometric simulation and inverse design of snap-through multistable structures."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
