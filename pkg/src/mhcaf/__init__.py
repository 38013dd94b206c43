"""Multi-branch handwritten character classifier on a small numpy autodiff engine.

Three feature branches (convolutional with CBAM, vision transformer,
Conformer) run on the same image; their 512-wide features interact through
multi-head cross-attention and feed a dense classification head.
"""

from .config import RunConfig
from .model import MHCAFNet
from .tensor import Tensor, grad_check, no_grad

__all__ = ["MHCAFNet", "RunConfig", "Tensor", "grad_check", "no_grad"]
__version__ = "0.1.0"
