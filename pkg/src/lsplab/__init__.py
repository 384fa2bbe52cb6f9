"""Label smoothing poisoning lab: soft-label backdoors against trigger reverse-engineering defenses."""
from .classifier import Classifier, TrainConfig, load_model, save_model, train
from .compensatory import CompensatoryBound, CompensatoryInputs, general_bound, nc_bound, plan_attack
from .core import LabeledDataset, generate_synthetic_dataset, load_idx_dataset, split_for_poisoning
from .defense import (AbsConfig, DetectConfig, DetectionVerdict, ReversalConfig, ReversalResult, detect,
                      mad_anomaly, reverse_trigger_abs, reverse_trigger_nc)
from .lsp import (PoisonConfig, ce_at_attack_rate, deployment_attack_rate, max_attack_rate, poison_dataset,
                  smooth_label)
from .metrics import (attack_success_rate, average_precision, benign_accuracy, detection_metrics,
                      reattack_success_rate)
from .pipeline import ExperimentConfig, Pipeline, minimal_config, run_pipeline
from .ssim import ssim
from .triggers import TriggerSpec, apply_trigger, make_badnets_spec

__version__ = "0.1.0"

__all__ = [
    "AbsConfig",
    "Classifier",
    "CompensatoryBound",
    "CompensatoryInputs",
    "DetectConfig",
    "DetectionVerdict",
    "ExperimentConfig",
    "LabeledDataset",
    "Pipeline",
    "PoisonConfig",
    "ReversalConfig",
    "ReversalResult",
    "TrainConfig",
    "TriggerSpec",
    "apply_trigger",
    "attack_success_rate",
    "average_precision",
    "benign_accuracy",
    "ce_at_attack_rate",
    "deployment_attack_rate",
    "detect",
    "detection_metrics",
    "general_bound",
    "generate_synthetic_dataset",
    "load_idx_dataset",
    "load_model",
    "mad_anomaly",
    "make_badnets_spec",
    "max_attack_rate",
    "minimal_config",
    "nc_bound",
    "plan_attack",
    "poison_dataset",
    "reattack_success_rate",
    "reverse_trigger_abs",
    "reverse_trigger_nc",
    "run_pipeline",
    "save_model",
    "smooth_label",
    "split_for_poisoning",
    "ssim",
    "train",
]
