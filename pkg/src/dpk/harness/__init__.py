"""Toy teacher/student harness: data, models and training loops."""

from dpk.harness.data import ArrayDataset, synthetic_dataset
from dpk.harness.models import FeatureTaps, ToyConvNet, parameter_checksum
from dpk.harness.train import (
    EvalReport,
    ModelPair,
    NonFiniteLossError,
    RunResult,
    RunState,
    TeacherNotFoundError,
    distill_step,
    evaluate,
    load_model,
    run_baseline,
    run_distillation,
)

__all__ = [
    "ArrayDataset", "synthetic_dataset", "FeatureTaps", "ToyConvNet", "parameter_checksum",
    "EvalReport", "ModelPair", "NonFiniteLossError", "RunResult", "RunState",
    "TeacherNotFoundError", "distill_step", "evaluate", "load_model", "run_baseline",
    "run_distillation",
]
