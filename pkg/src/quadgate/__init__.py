"""quadgate: quadrant cross-attention PVT scoring on a small numpy autodiff engine."""

from .errors import QuadgateError
from .model import EnsembleSpec, ModelConfig, QCrossAttPVT, desk_config, ensemble_predict, paper_config
from .training import TrainConfig, evaluate, train

__all__ = [
    "EnsembleSpec",
    "ModelConfig",
    "QCrossAttPVT",
    "QuadgateError",
    "TrainConfig",
    "desk_config",
    "ensemble_predict",
    "evaluate",
    "paper_config",
    "train",
]
__version__ = "0.1.0"
