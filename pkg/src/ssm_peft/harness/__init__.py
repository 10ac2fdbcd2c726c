"""Experiment configs, synthetic data, sweeps and persistence."""

from .config import ExperimentConfig, load_config, loads_config, parse_config
from .data import gen_target_matching, gen_toy_classification
from .experiment import run_bench, run_experiment
from .io import checkpoint_load, checkpoint_save, emit_metrics, plot_svg, read_metrics

__all__ = [
    "ExperimentConfig",
    "checkpoint_load",
    "checkpoint_save",
    "emit_metrics",
    "gen_target_matching",
    "gen_toy_classification",
    "load_config",
    "loads_config",
    "parse_config",
    "plot_svg",
    "read_metrics",
    "run_bench",
    "run_experiment",
]
