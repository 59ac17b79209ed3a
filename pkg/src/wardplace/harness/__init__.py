"""Configuration, pipeline and reports for end-to-end runs."""

from .config import ConfigError, RunConfig, load_config, stage_seed
from .pipeline import StageError, exit_code_for, run_pipeline

__all__ = ["ConfigError", "RunConfig", "StageError", "exit_code_for", "load_config", "run_pipeline", "stage_seed"]
