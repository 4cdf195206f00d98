"""Partially relevant video retrieval with multi-scale Gaussian attention."""
from .config import LossConfig, ModelConfig, TrainConfig
from .matching import BACKEND, solve_max_assignment

__all__ = ["BACKEND", "LossConfig", "ModelConfig", "TrainConfig", "solve_max_assignment"]
__version__ = "0.1.0"
