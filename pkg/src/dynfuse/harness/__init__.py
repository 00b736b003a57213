"""Experiment harness: configuration, sweep protocols and the command-line entry point."""

from .cli import cli_main
from .config import ExperimentConfig, NoiseSweep, config_from_dict, load_config
from .runner import (
    AblationRow,
    RobustnessRecord,
    SweepResult,
    run_ablation,
    run_dynamic,
    run_lambda_sweep,
    run_robustness,
    run_static,
)

__all__ = [
    "cli_main",
    "ExperimentConfig",
    "NoiseSweep",
    "config_from_dict",
    "load_config",
    "AblationRow",
    "RobustnessRecord",
    "SweepResult",
    "run_ablation",
    "run_dynamic",
    "run_lambda_sweep",
    "run_robustness",
    "run_static",
]
