"""Dual-gate checkpoint fusion, baseline merges and activation compatibility."""

from .baselines import DareConfig, TiesConfig, dare_merge, task_arithmetic, ties_merge, weight_average
from .compatibility import (
    ActivationTrace,
    CompatibilityReport,
    ModuleStats,
    Verdict,
    analyze_trace,
    compatibility_score,
    module_stats,
    normalize_across_modules,
    record_trace,
    threshold_verdict,
)
from .core import (
    FusionWeights,
    GateConfig,
    GatingNet,
    channel_diff,
    dual_gate_weights,
    fuse_checkpoints,
    fuse_lora,
    fuse_many,
    fuse_matrix,
    fuse_matrix_blockwise,
    global_gate,
    local_gate,
    tune_gating_net,
    weight_entropy,
)
from .errors import *  # noqa: F401,F403
from .tensor_store import Checkpoint, PairReport, Tensor, TensorRole, load_checkpoint, save_checkpoint, validate_pair

__version__ = "0.1.0"
