"""Multimodal state-space forecasting with a latent Gaussian backbone and a
compact causal text codec, built on a from-scratch reverse-mode tape."""

__version__ = "0.1.0"

from .config import TrainConfig
from .data import Observation, NormStats, SynthConfig, synth_generate, split_811
from .model import Forecaster
from .training import Checkpoint, fit
from .forecast import ForecastResult, filter_history, rollout

__all__ = [
    "TrainConfig",
    "Observation",
    "NormStats",
    "SynthConfig",
    "synth_generate",
    "split_811",
    "Forecaster",
    "Checkpoint",
    "fit",
    "ForecastResult",
    "filter_history",
    "rollout",
    "__version__",
]
