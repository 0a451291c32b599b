"""Text-guided latent diffusion for skeleton action recognition."""

__version__ = "0.1.0"

from .config import RunConfig, TrainConfig, load_config
from .dataset import GenerationSpec, SkeletonDataset, generate_dataset, load_dataset, save_dataset
from .estimator import CoCoDiffClassifier
from .evaluation import evaluate, run_sweep
from .training import Checkpoint, run_pipeline

__all__ = [
    "Checkpoint", "CoCoDiffClassifier", "GenerationSpec", "RunConfig", "SkeletonDataset",
    "TrainConfig", "evaluate", "generate_dataset", "load_config", "load_dataset",
    "run_pipeline", "run_sweep", "save_dataset",
]
