"""Residual spatial fusion for RGB-thermal semantic segmentation.

A numpy-based autodiff engine (numba-accelerated convolutions with a pure
numpy fallback), saliency-IoU pseudo-labels, confidence-gated cross-modality
fusion blocks, and the branch-merging algebra that collapses each block's
multi-branch convolution into a single kernel for inference.
"""

from .backend import active_backend
from .config import RunConfig, toy_profile
from .model import RsfNet
from .tensor import Tensor, no_grad

__all__ = ["RsfNet", "RunConfig", "Tensor", "active_backend", "no_grad", "toy_profile"]
__version__ = "0.1.0"
