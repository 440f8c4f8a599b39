"""Inference from aggregate data with Sinkhorn belief propagation."""
from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND", "__version__"]
__version__ = "0.1.0"
