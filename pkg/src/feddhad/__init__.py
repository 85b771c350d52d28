"""Federated learning simulator with non-IID-aware aggregation and adaptive dropout."""

from .config import ExperimentConfig, parse_config
from .errors import (
    CapacityError,
    ConfigError,
    DomainError,
    FedError,
    NumericalError,
    StructuralError,
)
from .simulation import run_experiment, simulate

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "DomainError",
    "ExperimentConfig",
    "FedError",
    "NumericalError",
    "StructuralError",
    "parse_config",
    "run_experiment",
    "simulate",
]
