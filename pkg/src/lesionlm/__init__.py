"""Gradient-guided lesioning of a micro language model and voxel-wise
encoding analysis on synthetic BOLD data."""
from .config import ExperimentConfig, load_config, small_config
from .pipeline import RunManifest, run_pipeline

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "RunManifest", "load_config", "run_pipeline", "small_config"]
