"""Gradient-flow-preserving pruning with a lazy-regime pruning-time detector."""

from .autodiff import Tensor, grad, hvp
from .config import ExperimentConfig, load_config
from .criteria import PruningMask, ScoreVector, build_mask, prune, score
from .data import Dataset, csr_disk_estimate, load_checkpoint, make_synthetic, save_checkpoint
from .diagnostics import gf_ntk_identity, gradient_flow, ntk, taylor_probe
from .lifecycle import DetectorState, Schedule, default_threshold, detector_update, iterative_ratios, run_pipeline
from .models import Layer, Model, cnn, forward, loss, mlp, parameter_index_map
from .records import MetricsRecord
from .structured import NodeMask, build_node_mask, compact, gate_scores, inject_gates

__all__ = [
    "Dataset",
    "DetectorState",
    "ExperimentConfig",
    "Layer",
    "MetricsRecord",
    "Model",
    "NodeMask",
    "PruningMask",
    "Schedule",
    "ScoreVector",
    "Tensor",
    "build_mask",
    "build_node_mask",
    "cnn",
    "compact",
    "csr_disk_estimate",
    "default_threshold",
    "detector_update",
    "forward",
    "gate_scores",
    "gf_ntk_identity",
    "grad",
    "gradient_flow",
    "hvp",
    "inject_gates",
    "iterative_ratios",
    "load_checkpoint",
    "load_config",
    "loss",
    "make_synthetic",
    "mlp",
    "ntk",
    "parameter_index_map",
    "prune",
    "run_pipeline",
    "save_checkpoint",
    "score",
    "taylor_probe",
]
