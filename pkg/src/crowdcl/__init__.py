"""Curriculum learning for crowd counting by density-map regression."""

from .curriculum import PacingConfig, ScoredDataset, build_plan, pace, score_dataset
from .dataset import AnnotatedSample, DatasetManifest, DensityMap, generate_density_map, load_dataset, synthesize_dataset
from .evaluation import EvaluationReport, evaluate, game, mae, mse
from .models import ModelCheckpoint, ModelSpec, build_model, load_checkpoint, register_external
from .training import TrainConfig, TrainTrace, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatedSample", "DatasetManifest", "DensityMap", "EvaluationReport", "ModelCheckpoint", "ModelSpec",
    "PacingConfig", "ScoredDataset", "TrainConfig", "TrainTrace", "build_model", "build_plan", "evaluate", "game",
    "generate_density_map", "load_checkpoint", "load_dataset", "mae", "mse", "pace", "register_external",
    "score_dataset", "synthesize_dataset", "train",
]
