"""Approximation error, sparsity and attention-mass concentration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import causal_attention_probs
from .kernel import KernelTrace
from .plan import RankingCost
from .tensor import as_tensor4


@dataclass
class SparsityReport:
    per_head: list[dict]
    aggregate: dict
    ranking_cost: RankingCost = field(default_factory=RankingCost)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "per_head": self.per_head,
            "aggregate": self.aggregate,
            "ranking_cost": self.ranking_cost.to_dict(),
            "pair_counting": "pass-1 counted as the exact causal triangle; pass-2 as rows x keys of committed tiles",
        }


@dataclass(frozen=True)
class ConcentrationStat:
    budget: float
    frac: float


def total_causal_pairs(seq_len: int) -> int:
    return seq_len * (seq_len + 1) // 2


def error_metrics(O_approx, O_ref):
    """Per-head mean squared and mean absolute error over the L*D outputs, in float64."""
    a, b = as_tensor4(O_approx, "O_approx"), as_tensor4(O_ref, "O_ref")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return (diff**2).mean(axis=(2, 3)), np.abs(diff).mean(axis=(2, 3))


def sparsity_from_trace(trace: KernelTrace, dims=None) -> np.ndarray:
    """Per-head ``1 - computed / total`` causal pairs, [Z, H]."""
    computed = trace.computed_pairs
    if dims is not None:
        Z, H, L = dims[:3]
        if computed.shape != (Z, H) or trace.segment.seq_len != L:
            raise ValueError("trace does not match the given dims")
    return 1.0 - computed / total_causal_pairs(trace.segment.seq_len)


def sparsity_report(O_approx, O_ref, computed_pairs, ranking_cost: RankingCost | None = None, config=None) -> SparsityReport:
    mse, mae = error_metrics(O_approx, O_ref)
    Z, H = mse.shape
    total = total_causal_pairs(np.shape(O_ref)[2])
    computed = np.asarray(computed_pairs, dtype=np.int64)
    per_head = []
    for z in range(Z):
        for h in range(H):
            per_head.append({
                "z": z,
                "h": h,
                "mse": float(mse[z, h]),
                "mae": float(mae[z, h]),
                "computed_pairs": int(computed[z, h]),
                "total_causal_pairs": total,
                "sparsity": 1.0 - int(computed[z, h]) / total,
            })
    aggregate = {
        "mean_mse": float(np.mean([r["mse"] for r in per_head])),
        "mean_mae": float(np.mean([r["mae"] for r in per_head])),
        "mean_sparsity": float(np.mean([r["sparsity"] for r in per_head])),
        "computed_pairs": int(computed.sum()),
    }
    return SparsityReport(per_head, aggregate, ranking_cost or RankingCost(), dict(config or {}))


def concentration_curve(attn_mass, ordering, budgets) -> list[ConcentrationStat]:
    """Share of each row's mass that falls in the first ``ceil(p * n)`` keys of ``ordering``.

    ``attn_mass`` is [rows, n] with rows summing to one over the ``n`` keys
    that ``ordering`` permutes. The share is averaged over rows.
    """
    w = np.asarray(attn_mass, dtype=np.float64)
    order = np.asarray(ordering, dtype=np.int64)
    if order.size == 0:
        raise ValueError("empty ordering")
    if w.ndim == 1:
        w = w[None]
    if w.shape[1] != order.size:
        raise ValueError(f"ordering has {order.size} keys, weights have {w.shape[1]}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    cum = np.cumsum(w[:, order], axis=1).mean(axis=0)
    out = []
    for p in budgets:
        if not 0 < p <= 1:
            raise ValueError(f"budget must be in (0, 1], got {p}")
        m = min(order.size, math.ceil(round(p * order.size, 9)))
        out.append(ConcentrationStat(float(p), float(min(1.0, cum[m - 1]))))
    return out


def prefix_concentration(Q, K, plan, budget: float, z: int = 0, h: int = 0):
    """Mean concentration over segments n >= 1 under ``kv_perm`` order and under original order.

    Each segment's queries attend over their causal prefix only (dense causal
    weights restricted to [0, n*S) and renormalized). Returns ``(ranked, original)``.
    """
    probs = causal_attention_probs(as_tensor4(Q, "Q")[z, h], as_tensor4(K, "K")[z, h])
    seg = plan.segment
    ranked, original = [], []
    for n in range(1, seg.n_segments):
        start, stop = seg.bounds(n)
        w = probs[start:stop, :start]
        w = w / w.sum(axis=1, keepdims=True)
        ranked.append(concentration_curve(w, plan.kv_perm[n][z, h], [budget])[0].frac)
        original.append(concentration_curve(w, np.arange(start), [budget])[0].frac)
    if not ranked:
        raise ValueError("need at least two segments to measure prefix concentration")
    return float(np.mean(ranked)), float(np.mean(original))
