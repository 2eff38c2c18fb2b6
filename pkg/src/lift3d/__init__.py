"""Lift a single segmented photo into a 360-degree renderable 3D object.

The scene is a hash-grid radiance field optimized against the reference
view (photometric, depth-ranking and smoothness losses) and random orbit
views scored by a guided diffusion prior, with geometry regularizers
keeping the density compact and front-facing.
"""

from .config import RunConfig, config_from_dict, load_config, save_config
from .dataio import Checkpoint, ReferenceBundle, load_checkpoint, load_reference, save_checkpoint
from .pipeline import (
    LiftResult,
    PriorBundle,
    build_toy_prior,
    evaluate_frames,
    lift,
    load_prior,
    render_orbit,
    save_prior,
)
from .training import TrainResult, train_lift

__all__ = [
    "Checkpoint",
    "LiftResult",
    "PriorBundle",
    "ReferenceBundle",
    "RunConfig",
    "TrainResult",
    "build_toy_prior",
    "config_from_dict",
    "evaluate_frames",
    "lift",
    "load_checkpoint",
    "load_config",
    "load_prior",
    "load_reference",
    "render_orbit",
    "save_checkpoint",
    "save_config",
    "save_prior",
    "train_lift",
]

__version__ = "0.1.0"
