"""Exact causal attention and the tiled online-softmax engine built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import as_tensor4, check_same_dims


@dataclass(frozen=True)
class TileSpec:
    """Query-tile height ``block_m`` and key-tile width ``block_n``, in tokens."""

    block_m: int = 16
    block_n: int = 16

    def __post_init__(self):
        if self.block_m < 1 or self.block_n < 1:
            raise ValueError(f"tile sizes must be >= 1, got {self.block_m}x{self.block_n}")


@dataclass
class OnlineSoftmaxState:
    """Running max ``m``, normalizer ``l`` and value accumulator ``acc`` per query row.

    ``m`` and ``l`` have shape [..., M]; ``acc`` has shape [..., M, D]. All float64.
    """

    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @classmethod
    def empty(cls, shape, head_dim: int) -> "OnlineSoftmaxState":
        shape = tuple(shape)
        return cls(
            m=np.full(shape, -np.inf),
            l=np.zeros(shape),
            acc=np.zeros(shape + (head_dim,)),
        )

    def copy(self) -> "OnlineSoftmaxState":
        return OnlineSoftmaxState(self.m.copy(), self.l.copy(), self.acc.copy())

    def finalize(self) -> np.ndarray:
        """Return ``acc / l``. A row that never saw a key is an error, not a zero."""
        if np.any(self.l == 0):
            raise ValueError("uncovered query row")
        return self.acc / self.l[..., None]


def softmax_scale(head_dim: int) -> float:
    return 1.0 / math.sqrt(head_dim)


def os_step(state: OnlineSoftmaxState, q, k, v, mask=None, scale=None):
    """One online-softmax merge.

    Returns ``(new_state, prev_l)`` where ``prev_l`` is the old normalizer
    re-expressed at the new running max, so ``new_state.l - prev_l`` is the
    mass contributed by this tile.

    ``q`` is [..., M, D]; ``k`` and ``v`` are [..., N, D] and broadcast against
    the leading dims of ``q``. ``mask`` broadcasts to [..., M, N], True = visible.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if scale is None:
        scale = softmax_scale(q.shape[-1])

    s = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m_new = np.maximum(state.m, s.max(axis=-1))
    # A row with nothing visible yet keeps m = -inf; shift by 0 so exp() stays defined.
    shift = np.where(np.isfinite(m_new), m_new, 0.0)
    alpha = np.exp(state.m - shift)
    p = np.exp(s - shift[..., None])

    if mask is not None and not np.isfinite(v).all():
        # 0 * NaN would leak masked (possibly poisoned) values into the row.
        vis = np.broadcast_to(mask, p.shape)[..., None]
        pv = np.where(vis, p[..., None] * v[..., None, :, :], 0.0).sum(axis=-2)
    else:
        pv = p @ v

    prev_l = state.l * alpha
    new = OnlineSoftmaxState(
        m=m_new,
        l=prev_l + p.sum(axis=-1),
        acc=state.acc * alpha[..., None] + pv,
    )
    return new, prev_l


def os_update(state: OnlineSoftmaxState, q, k, v, mask=None, scale=None) -> OnlineSoftmaxState:
    """Merge one key tile into ``state``; masked entries contribute nothing."""
    return os_step(state, q, k, v, mask, scale)[0]


def causal_attention_probs(q_rows: np.ndarray, k_rows: np.ndarray) -> np.ndarray:
    """Row-normalized causal softmax weights [L, L] for one head, float64."""
    q = q_rows.astype(np.float64)
    k = k_rows.astype(np.float64)
    n = q.shape[0]
    s = (q @ k.T) * softmax_scale(q.shape[1])
    s[np.triu_indices(n, 1)] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p


def dense_causal_attention(Q, K, V) -> np.ndarray:
    """Reference causal attention via an explicit row softmax, float64 inside, float32 out."""
    Q, K, V = as_tensor4(Q, "Q"), as_tensor4(K, "K"), as_tensor4(V, "V")
    Z, H, L, D = check_same_dims(Q, K, V)
    out = np.empty((Z, H, L, D), dtype=np.float32)
    for z in range(Z):
        for h in range(H):
            p = causal_attention_probs(Q[z, h], K[z, h])
            out[z, h] = p @ V[z, h].astype(np.float64)
    return out


def flash_causal_attention(Q, K, V, tiles: TileSpec = TileSpec(), rng: np.random.Generator | None = None):
    """Tiled causal attention with the online-softmax recurrence.

    Key tiles are visited in canonical order unless ``rng`` is given, in which
    case each query tile visits its key tiles in a random order. Either way the
    result matches :func:`dense_causal_attention` up to rounding.
    """
    Q, K, V = as_tensor4(Q, "Q"), as_tensor4(K, "K"), as_tensor4(V, "V")
    Z, H, L, D = check_same_dims(Q, K, V)
    bm, bn = tiles.block_m, tiles.block_n
    out = np.empty((Z, H, L, D), dtype=np.float32)
    pos = np.arange(L)

    for q0 in range(0, L, bm):
        q1 = min(q0 + bm, L)
        state = OnlineSoftmaxState.empty((Z, H, q1 - q0), D)
        key_tiles = list(range(0, q1, bn))
        if rng is not None:
            rng.shuffle(key_tiles)
        for k0 in key_tiles:
            k1 = min(k0 + bn, L)
            mask = None
            if k1 - 1 > q0:
                mask = pos[q0:q1, None] >= pos[None, k0:k1]
            state = os_update(state, Q[:, :, q0:q1], K[:, :, k0:k1], V[:, :, k0:k1], mask)
        out[:, :, q0:q1] = state.finalize()
    return out
