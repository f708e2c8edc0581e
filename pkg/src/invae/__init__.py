"""Invariant identifiable VAE for multi-environment count data."""

__version__ = "0.1.0"

from .model import CovariateSchema, InVAE, ModelConfig, SchemaError  # noqa: E402
from .synthdata import SynthConfig, default_suite, generate  # noqa: E402
from .training import Checkpoint, TrainConfig, embed, load_checkpoint, save_checkpoint, train  # noqa: E402

__all__ = [
    "Checkpoint", "CovariateSchema", "InVAE", "ModelConfig", "SchemaError", "SynthConfig", "TrainConfig",
    "default_suite", "embed", "generate", "load_checkpoint", "save_checkpoint", "train",
]
