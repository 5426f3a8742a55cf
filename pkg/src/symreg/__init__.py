"""Symbolic regression by discrete token diffusion, with a matched
autoregressive baseline, a postfix expression engine, corpus generation,
constant fitting, and evaluation metrics."""

__version__ = "0.1.0"

from .backbone import (
    MODE_AR,
    MODE_DIFFUSION,
    BackboneConfig,
    SequenceModel,
    config_parity_diff,
    parameter_parity_diff,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .constfit import FitProblem, FitResult, differential_evolution, fit_constants, lbfgs, objective
from .d3pm import NoiseSchedule, TransitionModel, d3pm_loss, posterior, q_xt_probs, sample, sample_xt
from .dataset import DatasetConfig, SplitData, build_dataset, iter_batches, load_split
from .encoder import PointEncoder
from .errors import SymregError
from .estimator import SymbolicRegressor
from .metrics import (
    EvalReport,
    acc_tau,
    compare_reports,
    evaluate_records,
    paired_t_test,
    r2_score,
)
from .training import TrainConfig, train_ar, train_diffusion
from .vocab import Vocabulary, detokenize, eval_rpn, tokenize, validate_rpn

__all__ = [
    "__version__",
    "MODE_AR",
    "MODE_DIFFUSION",
    "BackboneConfig",
    "SequenceModel",
    "config_parity_diff",
    "parameter_parity_diff",
    "load_checkpoint",
    "save_checkpoint",
    "FitProblem",
    "FitResult",
    "differential_evolution",
    "fit_constants",
    "lbfgs",
    "objective",
    "NoiseSchedule",
    "TransitionModel",
    "d3pm_loss",
    "posterior",
    "q_xt_probs",
    "sample",
    "sample_xt",
    "DatasetConfig",
    "SplitData",
    "build_dataset",
    "iter_batches",
    "load_split",
    "PointEncoder",
    "SymregError",
    "SymbolicRegressor",
    "EvalReport",
    "acc_tau",
    "compare_reports",
    "evaluate_records",
    "paired_t_test",
    "r2_score",
    "TrainConfig",
    "train_ar",
    "train_diffusion",
    "Vocabulary",
    "detokenize",
    "eval_rpn",
    "tokenize",
    "validate_rpn",
]
