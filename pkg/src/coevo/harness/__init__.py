"""Experiment orchestration, rate fitting, result emission and the command line."""

from .experiments import KINDS, ExperimentSpec, run_experiment
from .fitting import RateFit, fit_rate
from .output import ResultBundle, Table, emit_outputs

__all__ = ["KINDS", "ExperimentSpec", "RateFit", "ResultBundle", "Table", "emit_outputs",
           "fit_rate", "run_experiment"]
