"""moelab: a desk-scale lab for stochastic-expert and gated MoE transformers."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
