"""Configuration, orchestration and the command-line front end."""

from .config import COMMANDS, AbsorptionConfig, ConfigError, ExperimentConfig, GridConfig, load_config
from .runner import run, write_csv

__all__ = ["COMMANDS", "AbsorptionConfig", "ConfigError", "ExperimentConfig", "GridConfig", "load_config",
           "run", "write_csv"]
