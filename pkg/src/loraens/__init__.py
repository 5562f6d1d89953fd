"""LoRA ensembles of a micro vision transformer, with implicit-ensemble baselines,
calibration metrics and diversity diagnostics, on a numpy autodiff engine."""

from .adapters import (
    ConfigError,
    InitSpec,
    LoraAdapter,
    SnapshotPlan,
    lora_forward,
    lora_init,
    member_rng,
    member_seed,
    merge_lora_weights,
    plan_snapshots,
)
from .backbone import METHODS, ModelConfig, ViT, count_parameters
from .config import RunConfig
from .data import SyntheticSpec, corrupt, gen_ood, gen_synthetic, read_dataset, write_dataset
from .ensemble import build_model, mc_dropout_predict, predict_logits
from .metrics import (
    CalibrationReport,
    PredictionSet,
    ece,
    ensemble_aggregate,
    fit_temperature,
    nll,
    ood_scores,
    temperature_scale,
)
from .tensor import ContractError, DimensionError, NumericError, Tensor, backward, grad_check, no_grad
from .training import DivergenceError, SchedulePlan, TrainConfig, lr_at, train_run

__version__ = "0.1.0"

__all__ = [
    "CalibrationReport", "ConfigError", "ContractError", "DimensionError", "DivergenceError", "InitSpec",
    "LoraAdapter", "METHODS", "ModelConfig", "NumericError", "PredictionSet", "RunConfig", "SchedulePlan",
    "SnapshotPlan", "SyntheticSpec", "Tensor", "TrainConfig", "ViT", "backward", "build_model",
    "corrupt", "count_parameters", "ece", "ensemble_aggregate", "fit_temperature", "gen_ood", "gen_synthetic",
    "grad_check", "lora_forward", "lora_init", "lr_at", "mc_dropout_predict", "member_rng", "member_seed",
    "merge_lora_weights", "nll", "no_grad", "ood_scores", "plan_snapshots", "predict_logits", "read_dataset",
    "temperature_scale", "train_run", "write_dataset",
]
