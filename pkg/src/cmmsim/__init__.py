"""Cooperative map matching simulator for groups of GNSS-equipped vehicles."""

from .config import ConfigError, Mechanism, ScenarioConfig, config_from_dict, load_config
from .metrics import MetricsReport, emit_reports
from .scenario import build_world, run_mechanisms, run_scenario, run_seeds, simulate

__all__ = ["ConfigError", "Mechanism", "ScenarioConfig", "config_from_dict", "load_config", "MetricsReport",
           "emit_reports", "build_world", "run_mechanisms", "run_scenario", "run_seeds", "simulate"]
