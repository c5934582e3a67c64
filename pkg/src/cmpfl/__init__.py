"""Federated-learning simulator for covert model poisoning against mean,
Krum and trimmed-mean aggregation."""

from .aggregation import AggregationRule, ClientUpdate, aggregate
from .engine import ExperimentConfig, MetricsReport, run_experiment
from .models import Dataset, ModelSpec, TrainParams

__all__ = [
    "AggregationRule",
    "ClientUpdate",
    "Dataset",
    "ExperimentConfig",
    "MetricsReport",
    "ModelSpec",
    "TrainParams",
    "aggregate",
    "run_experiment",
]
__version__ = "0.1.0"
