"""Federated optimization with delayed global gradients: algorithms, models,
data partitioning, an experiment engine, and a gradient-leakage harness."""

from .engine import ExperimentConfig, MetricsTrace, rounds_to_target, run_experiment
from .errors import (ConfigError, FedLabError, InvalidInput, NumericalDivergence, ParseError,
                     Unsupported)
from .fedalgos import ALGORITHMS, AlgorithmConfig, make_algorithm
from .models import MODELS

__all__ = [
    "ALGORITHMS", "AlgorithmConfig", "ConfigError", "ExperimentConfig", "FedLabError",
    "InvalidInput", "MODELS", "MetricsTrace", "NumericalDivergence", "ParseError",
    "Unsupported", "make_algorithm", "rounds_to_target", "run_experiment",
]

__version__ = "0.1.0"
