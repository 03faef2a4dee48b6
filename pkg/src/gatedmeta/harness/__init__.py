"""Configuration-driven experiment runner, diagnostics suites and metric files."""
from .config import ConfigError, ExperimentConfig
from .metrics import MetricsSink
from .runner import RunResult, repeat_and_summarize, run, summarize_runs

__all__ = ["ConfigError", "ExperimentConfig", "MetricsSink", "RunResult", "run", "repeat_and_summarize", "summarize_runs"]
