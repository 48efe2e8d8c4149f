"""3D encoder-decoder segmentation with distributed dense connections, on numpy."""

from .config import TrainConfig
from .tensor import Tensor, grad_check, no_grad
from .topology import PATTERNS, TopologySpec, build_network, count_parameters, count_parameters_spec

__version__ = "0.1.0"

__all__ = [
    "PATTERNS",
    "Tensor",
    "TopologySpec",
    "TrainConfig",
    "build_network",
    "count_parameters",
    "count_parameters_spec",
    "grad_check",
    "no_grad",
]
