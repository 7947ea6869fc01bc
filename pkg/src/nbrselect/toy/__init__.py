"""Synthetic Gaussian adaptation problems and the experiments run on them."""

from .data import ToyConfig, ToyData, generate_toy_data
from .lab import EXPERIMENTS, ExperimentResult, run_experiment, train_toy, write_experiment
from .model import MlpModel, grl_backward

__all__ = [
    "ToyConfig",
    "ToyData",
    "generate_toy_data",
    "EXPERIMENTS",
    "ExperimentResult",
    "run_experiment",
    "train_toy",
    "write_experiment",
    "MlpModel",
    "grl_backward",
]
