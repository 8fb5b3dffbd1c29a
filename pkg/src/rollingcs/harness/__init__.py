"""Experiment harness: configs, commands and the CLI."""

from .config import ExperimentConfig, load_config, shipped_configs
from .experiments import (
    cmd_compare_solvers,
    cmd_gen,
    cmd_measure,
    cmd_nyquist,
    cmd_phase_sweep,
    cmd_reconstruct,
    cmd_rip_probe,
    cmd_sweep,
)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "shipped_configs",
    "cmd_gen",
    "cmd_measure",
    "cmd_reconstruct",
    "cmd_compare_solvers",
    "cmd_sweep",
    "cmd_nyquist",
    "cmd_phase_sweep",
    "cmd_rip_probe",
]
