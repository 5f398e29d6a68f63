"""Gated low-rank adapters with bilevel layer positioning."""

from ._kernels import BACKEND
from .adapters import Backbone, GatedLoRALayer, apply_selection, collect_params, init_adapter
from .bilevel import (
    BilevelState,
    H2CObjective,
    HypergradientEstimate,
    finetune_epoch,
    hypergradient,
    positioning_epoch,
    run,
    top_k,
)
from .config import ExperimentConfig
from .diffcore import Tape, finite_diff_gradient
from .harness import SyntheticTask, baselines, brute_force_oracle, evaluate_selection, layer_count_sweep, make_task
from .semloss import DirectionalLossContext, FrozenEncoder, batched_h2c, embed, h2c_loss

__all__ = [
    "BACKEND",
    "Backbone",
    "BilevelState",
    "DirectionalLossContext",
    "ExperimentConfig",
    "FrozenEncoder",
    "GatedLoRALayer",
    "H2CObjective",
    "HypergradientEstimate",
    "SyntheticTask",
    "Tape",
    "apply_selection",
    "baselines",
    "batched_h2c",
    "brute_force_oracle",
    "collect_params",
    "embed",
    "evaluate_selection",
    "finetune_epoch",
    "finite_diff_gradient",
    "h2c_loss",
    "hypergradient",
    "init_adapter",
    "layer_count_sweep",
    "make_task",
    "positioning_epoch",
    "run",
    "top_k",
]
