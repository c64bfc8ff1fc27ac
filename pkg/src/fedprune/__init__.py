"""Federated learning with per-client magnitude pruning and localization-preserving aggregation."""

from .config import ExperimentConfig
from .data import SyntheticConfig
from .errors import FedPruneError
from .federation import run_experiment

__all__ = ["ExperimentConfig", "SyntheticConfig", "FedPruneError", "run_experiment"]
__version__ = "0.1.0"
