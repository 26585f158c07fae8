"""Looped Transformer laboratory: FLT and LT baselines on a numpy autodiff core."""

from .backbone import BackboneConfig, ModelWeights, count_params, derive_dims, init_weights
from .loops import LoopVariant, incremental_decode, last_step_loss, loop_forward

__all__ = [
    "BackboneConfig",
    "ModelWeights",
    "LoopVariant",
    "count_params",
    "derive_dims",
    "init_weights",
    "incremental_decode",
    "last_step_loss",
    "loop_forward",
]
