"""Experiment orchestration and command-line interface."""

from .config import DEFAULTS_TEXT, ExperimentConfig
from .runner import RunManifest, ScenarioResult, run_scenario, sweep_eta, sweep_mc_samples

__all__ = [
    "DEFAULTS_TEXT",
    "ExperimentConfig",
    "RunManifest",
    "ScenarioResult",
    "run_scenario",
    "sweep_eta",
    "sweep_mc_samples",
]
