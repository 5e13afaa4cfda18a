"""Critical-representation fine-tuning (CRFT) on a small, fully inspectable transformer.

Modules: ``autodiff`` (float64 gradient helpers), ``model`` (decoder-only
transformer), ``info_flow`` (attention/saliency grids and critical-position
filters), ``intervention`` (low-rank edits), ``training`` (AdamW and the CRFT
loop), ``tasks`` (chain-arithmetic data), ``bench`` (evaluation and
experiments), ``io`` (checkpoints and heatmaps) and ``cli``.
"""
from __future__ import annotations

from .info_flow import CriticalSet, CrftConfig, identify, identify_batch
from .intervention import InterventionParams, init_params, param_count
from .model import ModelConfig, MicroTransformer, forward, greedy_decode
from .training import TrainConfig, train_crft

__all__ = [
    "CriticalSet", "CrftConfig", "identify", "identify_batch",
    "InterventionParams", "init_params", "param_count",
    "ModelConfig", "MicroTransformer", "forward", "greedy_decode",
    "TrainConfig", "train_crft",
]
__version__ = "0.1.0"
