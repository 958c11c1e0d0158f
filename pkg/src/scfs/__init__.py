"""Self-supervised pre-training with multi-layer feature search, on a small numpy autodiff engine."""
from .config import TrainConfig, load_config
from .estimators import KNNClassifier, LinearProbeClassifier, SCFSPretrainer
from .tensor import Tensor
from .trainer import TrainState, fit

__all__ = [
    "KNNClassifier",
    "LinearProbeClassifier",
    "SCFSPretrainer",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "fit",
    "load_config",
]
__version__ = "0.1.0"
