"""A small numpy deep-learning framework with an MNIST training harness."""
from .config import ModelSpec, load_config, parse_config
from .model import Model, build, evaluate, extract_features, param_count
from .training import TrainReport, fine_tune, train

__all__ = [
    "Model",
    "ModelSpec",
    "TrainReport",
    "build",
    "evaluate",
    "extract_features",
    "fine_tune",
    "load_config",
    "param_count",
    "parse_config",
    "train",
]
__version__ = "0.1.0"
