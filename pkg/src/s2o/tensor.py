"""Dense [Z, H, L, D] tensors and the index primitives used by the planner and kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Index vectors are
1-D int64 arrays. Nothing here copies more than it has to.
"""

from __future__ import annotations

import numpy as np

# Stand-in for -inf in score buffers; sorts last without producing NaN.
NEG_SENTINEL = float(np.finfo(np.float32).min)


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    """Validate and coerce ``x`` to a C-contiguous float32 array of shape [Z, H, L, D]."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D [Z, H, L, D], got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def check_same_dims(*tensors: np.ndarray) -> tuple[int, int, int, int]:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")
    return tensors[0].shape


def argsort_desc_stable(scores) -> np.ndarray:
    """Indices ordering ``scores`` from largest to smallest.

    Ties keep ascending original index. ``-inf``, the score sentinel and NaN all
    sort after every finite score, in ascending index order among themselves.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("scores must be a vector")
    if s.size == 0:
        raise ValueError("empty score vector")
    key = np.where(np.isnan(s), -np.inf, s)
    key = np.maximum(key, NEG_SENTINEL)
    # Stable sort on the negated key keeps equal scores in index order.
    return np.argsort(-key, kind="stable").astype(np.int64)


def mean_pool_rows(t: np.ndarray, z: int, h: int, row_range) -> np.ndarray:
    """Mean of rows ``row_range`` of slice (z, h), accumulated in float64, returned as float32."""
    start, stop = row_range.start or 0, row_range.stop
    if stop <= start:
        raise ValueError("empty pooling range")
    if start < 0 or stop > t.shape[2]:
        raise IndexError("pooling range outside [0, L)")
    block = t[z, h, start:stop].astype(np.float64)
    return block.mean(axis=0).astype(np.float32)


def _check_index(idx, domain_len: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("index vector must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= domain_len):
        raise IndexError(f"{what} index out of bounds")
    return idx


def gather_rows(t: np.ndarray, z: int, h: int, idx) -> np.ndarray:
    """Rows ``idx`` of slice (z, h) as a new [len(idx), D] array."""
    idx = _check_index(idx, t.shape[2], "gather")
    return t[z, h].take(idx, axis=0)


def scatter_rows(src: np.ndarray, z: int, h: int, idx, dst: np.ndarray) -> None:
    """Write ``src[i]`` into ``dst[z, h, idx[i]]``; other rows are left alone."""
    idx = _check_index(idx, dst.shape[2], "scatter")
    src = np.asarray(src)
    if src.shape[0] != idx.size:
        raise ValueError(f"{src.shape[0]} source rows for {idx.size} indices")
    if np.unique(idx).size != idx.size:
        raise ValueError("scatter collision")
    dst[z, h, idx] = src
