"""Intra-segment ranking: per-segment query orders and causal-prefix key orders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import argsort_desc_stable, as_tensor4, check_same_dims, mean_pool_rows


@dataclass(frozen=True)
class SegmentConfig:
    seq_len: int
    segment_len: int

    def __post_init__(self):
        if not 1 <= self.segment_len <= self.seq_len:
            raise ValueError(
                f"segment length must be in [1, {self.seq_len}], got {self.segment_len}"
            )

    @property
    def n_segments(self) -> int:
        return -(-self.seq_len // self.segment_len)

    @property
    def last_segment_len(self) -> int:
        return self.seq_len - (self.n_segments - 1) * self.segment_len

    def bounds(self, n: int) -> tuple[int, int]:
        """Token range [start, stop) of segment ``n``; ``start`` is also its prefix length."""
        start = n * self.segment_len
        return start, min(start + self.segment_len, self.seq_len)


@dataclass
class RankingCost:
    """Work done while ranking: D-length inner products and items passed through argsort."""

    dot_products: int = 0
    sort_items: int = 0

    def to_dict(self) -> dict:
        return {"dot_products": self.dot_products, "sort_items": self.sort_items}


@dataclass
class PermutationPlan:
    """Index arrays only; no tensor is moved.

    ``q_perm[n]`` has shape [Z, H, seg_len(n)] and holds segment-local offsets.
    ``kv_perm[n]`` has shape [Z, H, n*S] and holds absolute key positions.
    """

    segment: SegmentConfig
    q_perm: list[np.ndarray]
    kv_perm: list[np.ndarray]
    guide_source: str = "k_mean[0]"

    def to_dict(self) -> dict:
        return {
            "seq_len": self.segment.seq_len,
            "segment_len": self.segment.segment_len,
            "guide_source": self.guide_source,
            "q_perm": [p.tolist() for p in self.q_perm],
            "kv_perm": [p.tolist() for p in self.kv_perm],
        }


def segment_representatives(Q, K, cfg: SegmentConfig):
    """Mean-pooled query and key rows per segment, each of shape [Z, H, N, D] (float32)."""
    Q, K = as_tensor4(Q, "Q"), as_tensor4(K, "K")
    Z, H, L, D = check_same_dims(Q, K)
    if L != cfg.seq_len:
        raise ValueError(f"segment config is for L={cfg.seq_len}, tensors have L={L}")
    N = cfg.n_segments
    q_mean = np.empty((Z, H, N, D), dtype=np.float32)
    k_mean = np.empty((Z, H, N, D), dtype=np.float32)
    for n in range(N):
        rows = range(*cfg.bounds(n))
        for z in range(Z):
            for h in range(H):
                q_mean[z, h, n] = mean_pool_rows(Q, z, h, rows)
                k_mean[z, h, n] = mean_pool_rows(K, z, h, rows)
    return q_mean, k_mean


def rank_queries(Q, k_guide, cfg: SegmentConfig, cost: RankingCost | None = None) -> list[np.ndarray]:
    """Order each segment's queries by their inner product with the guide vector, descending."""
    Q = as_tensor4(Q, "Q")
    Z, H, L, D = Q.shape
    guide = np.asarray(k_guide, dtype=np.float64)
    if guide.shape != (Z, H, D):
        raise ValueError(f"guide must have shape {(Z, H, D)}, got {guide.shape}")
    q_perm = []
    for n in range(cfg.n_segments):
        start, stop = cfg.bounds(n)
        scores = np.einsum("zhsd,zhd->zhs", Q[:, :, start:stop].astype(np.float64), guide)
        perm = np.empty(scores.shape, dtype=np.int64)
        for z in range(Z):
            for h in range(H):
                perm[z, h] = argsort_desc_stable(scores[z, h])
        q_perm.append(perm)
        if cost is not None:
            cost.dot_products += Z * H * (stop - start)
            cost.sort_items += Z * H * (stop - start)
    return q_perm


def rank_prefix_keys(q_mean, K, cfg: SegmentConfig, cost: RankingCost | None = None) -> list[np.ndarray]:
    """Order each segment's causal prefix [0, n*S) by inner product with the segment's mean query.

    Keys at or beyond the segment start are never scored; they would carry the
    -inf sentinel and sort after the prefix anyway.
    """
    K = as_tensor4(K, "K")
    Z, H, L, D = K.shape
    q_mean = np.asarray(q_mean, dtype=np.float64)
    kv_perm = []
    for n in range(cfg.n_segments):
        prefix = cfg.bounds(n)[0]
        perm = np.empty((Z, H, prefix), dtype=np.int64)
        if prefix:
            scores = np.einsum("zhtd,zhd->zht", K[:, :, :prefix].astype(np.float64), q_mean[:, :, n])
            for z in range(Z):
                for h in range(H):
                    perm[z, h] = argsort_desc_stable(scores[z, h])
            if cost is not None:
                cost.dot_products += Z * H * prefix
                cost.sort_items += Z * H * prefix
        kv_perm.append(perm)
    return kv_perm


def build_plan(Q, K, segment_len: int) -> tuple[PermutationPlan, RankingCost]:
    """Rank queries and prefix keys for every segment, using segment 0's mean key as the guide."""
    Q, K = as_tensor4(Q, "Q"), as_tensor4(K, "K")
    L = check_same_dims(Q, K)[2]
    cfg = SegmentConfig(L, segment_len)
    cost = RankingCost()
    q_mean, k_mean = segment_representatives(Q, K, cfg)
    q_perm = rank_queries(Q, k_mean[:, :, 0], cfg, cost)
    kv_perm = rank_prefix_keys(q_mean, K, cfg, cost)
    return PermutationPlan(cfg, q_perm, kv_perm), cost
