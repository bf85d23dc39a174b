"""LoRA mixture-of-experts layers routed by a graph neural network."""
from .autograd import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
