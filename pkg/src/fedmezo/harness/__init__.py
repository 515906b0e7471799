"""Experiment harness: configs, runs, sweeps, plot data and self-checks."""

from .config import ConfigError, ExperimentConfig, from_dict, load_config

__all__ = ["ConfigError", "ExperimentConfig", "from_dict", "load_config"]
