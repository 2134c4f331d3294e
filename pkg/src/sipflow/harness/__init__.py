"""Experiment harness: strict JSON configs, end-to-end runners, plot-data
CSVs with rendered figures, and the sipflow CLI."""

from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .runner import RunSummary, compare_losses, generate_observed, run_experiment

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunSummary",
    "compare_losses",
    "config_hash",
    "generate_observed",
    "load_config",
    "run_experiment",
]
