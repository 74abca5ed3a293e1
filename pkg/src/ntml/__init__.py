"""Backdoor defence lab: a float64 reverse-mode autodiff core, a small CNN,
non-target training and mutual-learning purification, poisoning tools and an
experiment harness, all on procedurally generated images."""
from .errors import (ConfigError, DimensionError, FormatError, NTMLError, NumericError,
                     TrainingError, UsageError)
from .harness import ExperimentConfig, SweepSpec, prepare_data, run_experiment, sweep
from .losses import der
from .model import ArchSpec, ModelCheckpoint, load_checkpoint, save_checkpoint
from .pipeline import MetricsReport, TrainConfig, evaluate
from .poisoning import Dataset, TriggerSpec
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ConfigError", "Dataset", "DimensionError", "ExperimentConfig", "FormatError",
    "MetricsReport", "ModelCheckpoint", "NTMLError", "NumericError", "Rng", "SweepSpec",
    "TrainConfig", "TrainingError", "TriggerSpec", "UsageError", "der", "evaluate",
    "load_checkpoint", "prepare_data", "run_experiment", "save_checkpoint", "sweep",
]
