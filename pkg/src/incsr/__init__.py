"""Incremental face-to-cartoon super-resolution training engine."""

from .autograd import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
