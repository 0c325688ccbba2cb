"""Fixed-granularity block Top-K sparse attention with oracle block selection.

Blocks are ranked by their exact attention mass taken from the dense score
matrix, so no practical block selector can pick better blocks at the same
granularity. Only viable at desk-scale sequence lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import causal_attention_probs, softmax_scale
from .tensor import as_tensor4, check_same_dims


@dataclass(frozen=True)
class BlockBudget:
    """Keep the diagonal blocks plus the ``k`` heaviest causal-prefix blocks per query-block row."""

    block_rows: int = 16
    block_cols: int = 16
    k: int = 0

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("block dims must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")


def block_keep_mask(probs: np.ndarray, budget: BlockBudget) -> np.ndarray:
    """Boolean [L, L] mask of kept (query, key) pairs for one head, causal part only."""
    L = probs.shape[0]
    br, bc = budget.block_rows, budget.block_cols
    keep = np.zeros((L, L), dtype=bool)
    col_starts = np.arange(0, L, bc)
    for r0 in range(0, L, br):
        r1 = min(r0 + br, L)
        # Key blocks that end at or before the first row of this block row are pure prefix.
        n_prefix = r0 // bc
        keep[r0:r1, n_prefix * bc:r1] = True
        if n_prefix and budget.k:
            mass = np.add.reduceat(probs[r0:r1, :n_prefix * bc].sum(axis=0), col_starts[:n_prefix])
            top = np.argsort(-mass, kind="stable")[:budget.k]
            for j in top:
                keep[r0:r1, j * bc:(j + 1) * bc] = True
    return np.tril(keep)


def block_topk_attention(Q, K, V, budget: BlockBudget):
    """Masked causal softmax over the kept blocks.

    Returns ``(O, pair_count)`` with ``pair_count`` an int array [Z, H] of
    (query, key) pairs inside the kept causal region.
    """
    Q, K, V = as_tensor4(Q, "Q"), as_tensor4(K, "K"), as_tensor4(V, "V")
    Z, H, L, D = check_same_dims(Q, K, V)
    out = np.empty((Z, H, L, D), dtype=np.float32)
    pairs = np.zeros((Z, H), dtype=np.int64)
    for z in range(Z):
        for h in range(H):
            probs = causal_attention_probs(Q[z, h], K[z, h])
            keep = block_keep_mask(probs, budget)
            s = (Q[z, h].astype(np.float64) @ K[z, h].astype(np.float64).T) * softmax_scale(D)
            s = np.where(keep, s, -np.inf)
            s -= s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            out[z, h] = p @ V[z, h].astype(np.float64)
            pairs[z, h] = keep.sum()
    return out, pairs


def topk_for_sparsity(Q, K, target: float, block_rows: int = 16, block_cols: int = 16) -> BlockBudget:
    """Smallest-gap budget whose mean sparsity is closest to ``target``.

    Sparsity only depends on ``k`` and the block grid, not on the data, so
    this is a search over ``k`` alone.
    """
    Q = as_tensor4(Q, "Q")
    L = Q.shape[2]
    total = L * (L + 1) // 2
    best, best_gap = None, np.inf
    for k in range(0, -(-L // block_cols) + 1):
        budget = BlockBudget(block_rows, block_cols, k)
        kept = _kept_pairs(L, budget)
        gap = abs(1 - kept / total - target)
        if gap < best_gap:
            best, best_gap = budget, gap
    return best


def _kept_pairs(L: int, budget: BlockBudget) -> int:
    """Pair count of the kept region; independent of which prefix blocks are chosen."""
    br, bc = budget.block_rows, budget.block_cols
    count = 0
    for r0 in range(0, L, br):
        r1 = min(r0 + br, L)
        n_prefix = r0 // bc
        diag = sum(max(0, min(i + 1, r1) - n_prefix * bc) for i in range(r0, r1))
        count += diag + min(budget.k, n_prefix) * bc * (r1 - r0)
    return count
