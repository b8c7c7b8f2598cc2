"""Capsule network with inverted dynamic routing, head activation maps and Peekaboo training."""

from .config import ConfigError, ModelConfig, RunConfig, load_run_config
from .model import Decaps, ModelOutput, build
from .peekaboo import PredictionSet, distill_infer, peekaboo_train_step
from .routing import dynamic_routing_baseline, idr
from .loss import margin_at, spread_loss

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ModelConfig", "RunConfig", "load_run_config",
    "Decaps", "ModelOutput", "build",
    "PredictionSet", "distill_infer", "peekaboo_train_step",
    "dynamic_routing_baseline", "idr", "margin_at", "spread_loss",
]
