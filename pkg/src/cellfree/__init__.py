"""Downlink cell-free massive MIMO simulator with per-AP power constraints."""

from .scenario import ConfigError, ScenarioConfig, ScenarioStats, drop_network
from .evaluation import Scheme, SEReport
from .harness import ExperimentPlan, load_plan, parse_schemes, run

__version__ = "0.1.0"

__all__ = ["ConfigError", "ScenarioConfig", "ScenarioStats", "drop_network", "Scheme", "SEReport",
           "ExperimentPlan", "load_plan", "parse_schemes", "run", "__version__"]
