"""
ressl - relational self-supervised pretraining.
"""

from .config import ExperimentConfig, TrainConfig, parse_config
from .errors import ResslError
from .evaluation import export_embeddings, knn_eval, linear_probe, nearest_neighbors
from .memory_queue import MemoryQueue
from .model import ModelPair
from .trainer import Trainer, fit

__version__ = "1.0.0"
__all__ = [
    "ExperimentConfig",
    "TrainConfig",
    "parse_config",
    "ResslError",
    "export_embeddings",
    "knn_eval",
    "linear_probe",
    "nearest_neighbors",
    "MemoryQueue",
    "ModelPair",
    "Trainer",
    "fit",
]
