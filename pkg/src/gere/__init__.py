"""Replay with distilled activation-state targets for continual finetuning
of a tiny decoder, built on a small numpy autodiff engine."""

from .distill import ActivationState, ReplayPool, compute_stats, distill, thresholds
from .harness import METHODS, ReplayAssets, TrainConfig, f1_avg, run_continual, run_mtl
from .losses import WeightStrategy, ce_loss, combine_losses, kl_logit_loss, tm_loss
from .model import LoraConfig, ModelConfig, TinyDecoder, init_model
from .scheduler import plan_bi, plan_vanilla_mix

__version__ = "0.1.0"

__all__ = [
    "ActivationState",
    "LoraConfig",
    "METHODS",
    "ModelConfig",
    "ReplayAssets",
    "ReplayPool",
    "TinyDecoder",
    "TrainConfig",
    "WeightStrategy",
    "ce_loss",
    "combine_losses",
    "compute_stats",
    "distill",
    "f1_avg",
    "init_model",
    "kl_logit_loss",
    "plan_bi",
    "plan_vanilla_mix",
    "run_continual",
    "run_mtl",
    "thresholds",
    "tm_loss",
]
