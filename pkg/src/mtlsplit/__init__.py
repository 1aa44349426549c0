"""Multi-task learning over a split network: shared backbone on the edge, task heads remote."""

from .model import MtlModel, ModelConfig, backbone_forward, head_forward, predict_all
from .rng import Rng
from .tensor import Tape, Tensor, backward, finite_difference_grad

__all__ = [
    "MtlModel",
    "ModelConfig",
    "Rng",
    "Tape",
    "Tensor",
    "backbone_forward",
    "backward",
    "finite_difference_grad",
    "head_forward",
    "predict_all",
]

__version__ = "0.1.0"
