"""Block-wise replacement training for low-precision networks.

A small numpy-backed engine: reverse-mode tensors, learned-step-size
quantizers, block-partitioned residual networks, and a grafting framework
that trains a low-precision network against a frozen full-precision
counterpart with composite classification and distillation objectives.
"""

from bwrf.tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
