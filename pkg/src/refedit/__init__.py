"""Reference-guided image editing at desk scale.

A self-contained float64 tensor engine with reverse-mode differentiation,
the dual U-Net latent editing pipeline built on it (learned affine alignment,
adaptive residual scaling, three-branch attention fusion), reconstruction
metrics, synthetic tasks, and a CLI for experiments.
"""

from .config import ConfigError, ExperimentSpec, ModelConfig
from .engine import GradTape, ShapeError, Tensor, backward, no_grad
from .schedule import DiffusionSchedule, add_noise, build_schedule

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiffusionSchedule",
    "ExperimentSpec",
    "GradTape",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "add_noise",
    "backward",
    "build_schedule",
    "no_grad",
    "__version__",
]
