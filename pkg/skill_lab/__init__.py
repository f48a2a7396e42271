"""
Skill Injection Lab

A desk-scale setup for teaching a small masked language model arithmetic
without erasing what it learned from text:
- Numerics: numpy tensors with reverse-mode gradients
- Model: character-level post-norm encoder with flat, manifest-described parameters
- Data: exact arithmetic examples with OOD ranges, masked text corpus windows
- Losses: masked cross-entropy, numeral regression, EWC and λ₁ schedules
- Fisher: empirical Fisher scores and cross-task overlap per encoder layer
- Train: pretraining, anchor Fisher, skill injection and λ₂ sweeps
- Evaluate: exact match, magnitude histograms, retention probe, run comparison
"""

from .errors import (
    ArtifactIOError,
    ConfigError,
    DataError,
    GradientError,
    IntegrityError,
    LabError,
    NonFiniteLossError,
    ShapeError,
)
from .model import (
    Checkpoint,
    MaskedLanguageModel,
    ModelConfig,
    ParameterVector,
    Vocabulary,
    arithmetic_vocabulary,
    default_vocabulary,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    ArithmeticExample,
    GenConfig,
    NumeralRange,
    generate,
    load_corpus,
    make_example,
    mask_result,
    read_dataset,
    split_stratified,
    subsample,
    write_dataset,
)
from .losses import LossBreakdown, Lambda1Schedule, RegressionMode, ce_loss, ewc_loss, reg_loss, total_loss, update_lambda1
from .fisher import FisherScores, OverlapReport, cross_task_overlap, estimate_fisher, load_fisher, save_fisher, top_n
from .train import TrainConfig, compute_anchor, inject, lambda1_schedule_sweep, pretrain, sweep_lambda2
from .evaluate import EvalReport, compare_runs, exact_match_eval, magnitude_histogram, retention_probe

__all__ = [
    "ArtifactIOError",
    "ConfigError",
    "DataError",
    "GradientError",
    "IntegrityError",
    "LabError",
    "NonFiniteLossError",
    "ShapeError",
    "Checkpoint",
    "MaskedLanguageModel",
    "ModelConfig",
    "ParameterVector",
    "Vocabulary",
    "arithmetic_vocabulary",
    "default_vocabulary",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "ArithmeticExample",
    "GenConfig",
    "NumeralRange",
    "generate",
    "load_corpus",
    "make_example",
    "mask_result",
    "read_dataset",
    "split_stratified",
    "subsample",
    "write_dataset",
    "LossBreakdown",
    "Lambda1Schedule",
    "RegressionMode",
    "ce_loss",
    "ewc_loss",
    "reg_loss",
    "total_loss",
    "update_lambda1",
    "FisherScores",
    "OverlapReport",
    "cross_task_overlap",
    "estimate_fisher",
    "load_fisher",
    "save_fisher",
    "top_n",
    "TrainConfig",
    "compute_anchor",
    "inject",
    "lambda1_schedule_sweep",
    "pretrain",
    "sweep_lambda2",
    "EvalReport",
    "compare_runs",
    "exact_match_eval",
    "magnitude_histogram",
    "retention_probe",
]
