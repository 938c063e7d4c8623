"""Unsupervised video anomaly detection: localization-based reconstruction
with self-paced refinement, on a numpy autoencoder."""

from .config import RunConfig, parse_config
from .cubes import CubeSet, extract
from .errors import ConfigurationError, DivergenceError, IngestionError, SprError
from .nn import Adam, Autoencoder, build_autoencoder
from .pipeline import RunResult, StageError, run_experiment
from .scoring import auroc, eer, frame_scores, fuse
from .spr import TrainConfig, pace_thresholds, solve_weights, train
from .synth import CorpusSpec, generate

__version__ = "0.1.0"

__all__ = [
    "Adam", "Autoencoder", "ConfigurationError", "CorpusSpec", "CubeSet", "DivergenceError",
    "IngestionError", "RunConfig", "RunResult", "SprError", "StageError", "TrainConfig", "auroc",
    "build_autoencoder", "eer", "extract", "frame_scores", "fuse", "generate", "pace_thresholds",
    "parse_config", "run_experiment", "solve_weights", "train",
]
