"""Kronecker-product feature matching with soft warping for pairwise image verification."""

from .tensor import Tape, Tensor, backward
from .gradcheck import GradCheckReport, grad_check

__all__ = ["Tape", "Tensor", "backward", "grad_check", "GradCheckReport"]
__version__ = "0.1.0"
