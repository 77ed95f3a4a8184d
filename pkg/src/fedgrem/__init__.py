"""Federated gradient EM for mixture models with heterogeneous and outlier tasks."""
from .aggregate import PenaltySchedule, central_update, default_schedule
from .alignment import PermutationSet, StepwiseMode, align_exhaustive, align_stepwise, score
from .config import ExperimentConfig, load_config, parse_config
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    ConvergenceError,
    DegenerateClusterError,
    FedGremError,
    InfeasibleError,
    NumericError,
)
from .federation import FitResult, Mode, run
from .harness import derive_seed, rate_slope, run_experiment, sweep
from .local import InitStrategy, StepRule, initialize, make_step_plan, run_local
from .metrics import estimation_error
from .mixture import MixtureParams, ModelKind, TaskDataset, posterior
from .synthdata import ContaminationSpec, TaskGenSpec, apply_contamination, gen_tasks

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "ContaminationSpec", "ContractError", "ConvergenceError",
    "DegenerateClusterError", "ExperimentConfig", "FedGremError", "FitResult", "InfeasibleError",
    "InitStrategy", "MixtureParams", "Mode", "ModelKind", "NumericError", "PenaltySchedule",
    "PermutationSet", "StepRule", "StepwiseMode", "TaskDataset", "TaskGenSpec", "align_exhaustive",
    "align_stepwise", "apply_contamination", "central_update", "default_schedule", "derive_seed",
    "estimation_error", "gen_tasks", "initialize", "load_config", "make_step_plan", "parse_config",
    "posterior", "rate_slope", "run", "run_experiment", "run_local", "score", "sweep",
]
