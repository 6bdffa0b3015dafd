"""Experiment orchestration: config files, repetition, metric export, and
bound-vs-empirical reports."""

from .config import ExperimentConfig, parse_config, parse_config_text
from .plotdata import METRICS, MetricTable, emit_plot_data
from .runner import (BoundReport, ExperimentArtifacts, MaeStatistics, build_task,
                     compare_with_bound, evaluate_bounds, mae_statistics,
                     measure_bound_params, run_experiment, task_fingerprint)

__all__ = [
    "BoundReport", "ExperimentArtifacts", "ExperimentConfig", "METRICS",
    "MaeStatistics", "MetricTable", "build_task", "compare_with_bound",
    "emit_plot_data", "evaluate_bounds", "mae_statistics", "measure_bound_params",
    "parse_config", "parse_config_text", "run_experiment", "task_fingerprint",
]
