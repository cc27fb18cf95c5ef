"""Desk-scale simulator of noise-robust fair federated learning."""

from .fed_core import RoundConfig, SelectionStrategy, run_experiment
from .synth_data import ScenarioConfig, build_scenario

__all__ = ["RoundConfig", "ScenarioConfig", "SelectionStrategy", "build_scenario", "run_experiment"]
__version__ = "0.1.0"
