"""Permuted sparse attention with early stopping, plus an exact reference and benchmark harness."""

from .attention import (
    OnlineSoftmaxState,
    TileSpec,
    dense_causal_attention,
    flash_causal_attention,
    os_update,
)
from .baselines import BlockBudget, block_topk_attention
from .kernel import (
    KernelConfig,
    KernelTrace,
    PassBuffers,
    early_stop_check,
    fused_single_pass,
    pass1_dense_init,
    pass2_sparse,
    s2o_attention,
)
from .metrics import concentration_curve, error_metrics, sparsity_from_trace
from .plan import PermutationPlan, RankingCost, SegmentConfig, build_plan
from .synthetic import SyntheticSpec, generate_synthetic

__all__ = [
    "BlockBudget",
    "KernelConfig",
    "KernelTrace",
    "OnlineSoftmaxState",
    "PassBuffers",
    "PermutationPlan",
    "RankingCost",
    "SegmentConfig",
    "SyntheticSpec",
    "TileSpec",
    "block_topk_attention",
    "build_plan",
    "concentration_curve",
    "dense_causal_attention",
    "early_stop_check",
    "error_metrics",
    "flash_causal_attention",
    "fused_single_pass",
    "generate_synthetic",
    "os_update",
    "pass1_dense_init",
    "pass2_sparse",
    "s2o_attention",
    "sparsity_from_trace",
]
