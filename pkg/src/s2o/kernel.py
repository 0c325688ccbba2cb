"""Two-pass permuted sparse attention with monotone-gain early stopping.

Pass 1 runs dense causal attention inside each segment and keeps the
online-softmax state of every query row. Pass 2 resumes those states, visits
the segment's causal prefix in ranked order one key tile at a time, and stops
once the tile no longer adds enough normalizer mass. The fused variant does
both passes per query tile without materializing the intermediate buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import OnlineSoftmaxState, TileSpec, os_step, os_update
from .plan import PermutationPlan, RankingCost, SegmentConfig, build_plan
from .tensor import as_tensor4, check_same_dims

STOP_MODES = ("row", "tile")


@dataclass(frozen=True)
class KernelConfig:
    """Kernel hyperparameters.

    ``stop_mode`` chooses who obeys the gain threshold. With ``"row"`` each
    query row stops committing as soon as its own relative gain drops below
    ``tau`` and the tile keeps loading keys while any row is still gaining.
    With ``"tile"`` all rows of a tile commit together and stop together once
    the largest row gain drops below ``tau``.
    """

    segment_len: int
    tau: float = 0.005
    tiles: TileSpec = field(default_factory=TileSpec)
    q_reorder: bool = True
    fused: bool = False
    stop_mode: str = "row"

    def __post_init__(self):
        if self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")
        if not self.tau >= 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.fused and self.q_reorder:
            raise ValueError("the fused variant does not reorder queries; set q_reorder=False")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"stop_mode must be one of {STOP_MODES}")

    @property
    def window(self) -> int:
        # The dense intra-segment pass is the local window.
        return self.segment_len


@dataclass
class PassBuffers:
    """Per-row online-softmax state after pass 1, in original row order."""

    acc: np.ndarray  # [Z, H, L, D]
    l: np.ndarray  # [Z, H, L]
    m: np.ndarray  # [Z, H, L]


@dataclass
class KernelTrace:
    """What the kernel actually computed.

    ``processed_tiles[n]`` is [Z, H, T_n]: prefix tiles committed by each query
    tile of segment ``n``. ``row_prefix_keys`` is [Z, H, L]: how many keys of
    ``kv_perm[n]`` each row committed, so its visible set is the causal part of
    its own segment plus ``kv_perm[n][:row_prefix_keys]``.
    """

    segment: SegmentConfig
    tiles: TileSpec
    processed_tiles: list[np.ndarray]
    row_prefix_keys: np.ndarray
    pass1_pairs: np.ndarray  # [Z, H]
    pass2_pairs: np.ndarray  # [Z, H]

    @property
    def computed_pairs(self) -> np.ndarray:
        return self.pass1_pairs + self.pass2_pairs

    def same_schedule(self, other: "KernelTrace") -> bool:
        return (
            all(np.array_equal(a, b) for a, b in zip(self.processed_tiles, other.processed_tiles))
            and np.array_equal(self.row_prefix_keys, other.row_prefix_keys)
            and np.array_equal(self.pass1_pairs, other.pass1_pairs)
            and np.array_equal(self.pass2_pairs, other.pass2_pairs)
        )


def relative_gain(prev_l, new_l) -> np.ndarray:
    """``(new_l - prev_l) / prev_l`` with both normalizers at the same running max."""
    prev_l = np.asarray(prev_l, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.asarray(new_l, dtype=np.float64) - prev_l) / prev_l


def early_stop_check(prev_l, new_l, tau: float, active=None):
    """True where no (active) row gained at least ``tau`` of its previous mass.

    Reduces over the last axis, so a [..., M] input yields a [...] result and a
    plain vector yields a bool. NaN gains count as not gaining.
    """
    prev_l = np.asarray(prev_l, dtype=np.float64)
    if active is None:
        active = np.ones(prev_l.shape, dtype=bool)
    if np.any(prev_l[active] <= 0):
        raise ValueError("uninitialized state")
    gaining = active & (relative_gain(prev_l, new_l) >= tau)
    stop = ~gaining.any(axis=-1)
    return bool(stop) if np.ndim(stop) == 0 else stop


def _check_inputs(Q, K, V):
    Q, K, V = as_tensor4(Q, "Q"), as_tensor4(K, "K"), as_tensor4(V, "V")
    return (Q, K, V) + (check_same_dims(Q, K, V),)


def _tile_layout(n_rows: int, block_m: int):
    """Padded [T, block_m] row offsets and the matching validity mask."""
    n_tiles = -(-n_rows // block_m)
    offsets = np.arange(n_tiles * block_m).reshape(n_tiles, block_m)
    return offsets, offsets < n_rows


def _segment_init(Qg, Kg, Vg, start: int, stop: int, offsets: np.ndarray, block_n: int):
    """Dense causal attention of the given query offsets over their own segment.

    ``Qg``, ``Kg``, ``Vg`` are [G, L, D]. ``offsets`` is [T, M] segment-local
    rows; entries past the segment end are padding and attend like the last row.
    Returns an unfinalized state with leading shape [G, T, M].
    """
    G, _, D = Qg.shape
    rows = start + np.minimum(offsets, stop - start - 1)
    state = OnlineSoftmaxState.empty((G,) + offsets.shape, D)
    q = Qg[:, rows]
    last_row = rows.max(axis=1)
    for k0 in range(start, stop, block_n):
        k1 = min(k0 + block_n, stop)
        # Tiles whose rows all precede this key tile would be fully masked.
        live = np.nonzero(last_row >= k0)[0]
        if live.size == 0:
            continue
        b = live[0]
        mask = rows[b:, :, None] >= np.arange(k0, k1)[None, None, :]
        sub = OnlineSoftmaxState(state.m[:, b:], state.l[:, b:], state.acc[:, b:])
        sub = os_update(sub, q[:, b:], Kg[:, None, k0:k1], Vg[:, None, k0:k1], mask)
        state.m[:, b:], state.l[:, b:], state.acc[:, b:] = sub.m, sub.l, sub.acc
    return state


def _prefix_traverse(q, state, Kg, Vg, order, valid, tau, block_n, stop_mode):
    """Resume ``state`` over the key positions ``order`` in ``block_n`` tiles.

    ``q`` is [G, T, M, D], ``order`` is [G, P]. Returns the updated state, the
    count of committed tiles per query tile [G, T] and committed keys per row
    [G, T, M].
    """
    G, T, M = valid.shape
    processed = np.zeros((G, T), dtype=np.int64)
    row_keys = np.zeros((G, T, M), dtype=np.int64)
    active = valid.copy()
    alive = active.any(axis=-1)
    P = order.shape[1]
    for j0 in range(0, P, block_n):
        if not alive.any():
            break
        idx = order[:, j0:j0 + block_n]
        k = np.take_along_axis(Kg, idx[..., None], axis=1)[:, None]
        v = np.take_along_axis(Vg, idx[..., None], axis=1)[:, None]
        new, prev_l = os_step(state, q, k, v)

        alive &= ~early_stop_check(prev_l, new.l, tau, active)
        if stop_mode == "row":
            commit = active & (relative_gain(prev_l, new.l) >= tau)
        else:
            commit = active & alive[..., None]
        active = commit
        alive = active.any(axis=-1)

        processed += alive
        row_keys += idx.shape[1] * commit
        state.m = np.where(commit, new.m, state.m)
        state.l = np.where(commit, new.l, state.l)
        state.acc = np.where(commit[..., None], new.acc, state.acc)
    return state, processed, row_keys


def _pass2_pairs(processed: np.ndarray, tile_rows: np.ndarray, prefix: int, block_n: int) -> np.ndarray:
    keys = np.minimum(processed * block_n, prefix)
    return (keys * tile_rows).sum(axis=-1)


def _flat(t: np.ndarray) -> np.ndarray:
    Z, H = t.shape[:2]
    return t.reshape((Z * H,) + t.shape[2:])


def pass1_dense_init(Q, K, V, cfg: KernelConfig) -> PassBuffers:
    """Dense causal attention restricted to each segment, left unnormalized."""
    Q, K, V, (Z, H, L, D) = _check_inputs(Q, K, V)
    seg = SegmentConfig(L, cfg.segment_len)
    Qg, Kg, Vg = _flat(Q), _flat(K), _flat(V)
    acc = np.empty((Z * H, L, D))
    l = np.empty((Z * H, L))
    m = np.empty((Z * H, L))
    for n in range(seg.n_segments):
        start, stop = seg.bounds(n)
        offsets, valid = _tile_layout(stop - start, cfg.tiles.block_m)
        st = _segment_init(Qg, Kg, Vg, start, stop, offsets, cfg.tiles.block_n)
        sel = (slice(None), valid)
        acc[:, start:stop] = st.acc[sel]
        l[:, start:stop] = st.l[sel]
        m[:, start:stop] = st.m[sel]
    shape = (Z, H, L)
    return PassBuffers(acc.reshape(shape + (D,)), l.reshape(shape), m.reshape(shape))


def _empty_trace(seg: SegmentConfig, tiles: TileSpec, Z: int, H: int) -> KernelTrace:
    processed = [
        np.zeros((Z, H, -(-(stop - start) // tiles.block_m)), dtype=np.int64)
        for start, stop in map(seg.bounds, range(seg.n_segments))
    ]
    pass1 = sum((b - a) * (b - a + 1) // 2 for a, b in map(seg.bounds, range(seg.n_segments)))
    return KernelTrace(
        segment=seg,
        tiles=tiles,
        processed_tiles=processed,
        row_prefix_keys=np.zeros((Z, H, seg.seq_len), dtype=np.int64),
        pass1_pairs=np.full((Z, H), pass1, dtype=np.int64),
        pass2_pairs=np.zeros((Z, H), dtype=np.int64),
    )


def _check_plan(plan: PermutationPlan, cfg: KernelConfig, L: int):
    if plan.segment.segment_len != cfg.segment_len or plan.segment.seq_len != L:
        raise ValueError(
            f"plan/config mismatch: plan has S={plan.segment.segment_len}, L={plan.segment.seq_len}; "
            f"config has S={cfg.segment_len}, L={L}"
        )


def pass2_sparse(Q, K, V, bufs: PassBuffers, plan: PermutationPlan, cfg: KernelConfig):
    """Resume pass-1 states and traverse each segment's ranked prefix with early stopping.

    Returns ``(O, trace)``. Queries are visited in ``plan.q_perm`` order when
    ``cfg.q_reorder`` is set, otherwise in original order.
    """
    Q, K, V, (Z, H, L, D) = _check_inputs(Q, K, V)
    _check_plan(plan, cfg, L)
    seg = plan.segment
    bm, bn = cfg.tiles.block_m, cfg.tiles.block_n
    G = Z * H
    Qg, Kg, Vg = _flat(Q), _flat(K), _flat(V)
    A, Lb, Mb = _flat(bufs.acc), _flat(bufs.l), _flat(bufs.m)
    out = np.empty((G, L, D), dtype=np.float32)
    trace = _empty_trace(seg, cfg.tiles, Z, H)
    row_keys_out = np.zeros((G, L), dtype=np.int64)
    pass2 = np.zeros(G, dtype=np.int64)

    for n in range(seg.n_segments):
        start, stop = seg.bounds(n)
        s = stop - start
        if cfg.q_reorder:
            perm = plan.q_perm[n].reshape(G, s)
        else:
            perm = np.broadcast_to(np.arange(s), (G, s))
        offsets, valid = _tile_layout(s, bm)
        T = offsets.shape[0]
        # Padding slots reuse the last real slot of the permuted order.
        slots = np.minimum(offsets, s - 1).reshape(-1)
        rows = start + np.take(perm, slots, axis=1)  # [G, T*bm] absolute rows

        def pick(buf):
            return np.take_along_axis(buf, rows.reshape((G, -1) + (1,) * (buf.ndim - 2)), axis=1)

        q = pick(Qg).reshape(G, T, bm, D)
        state = OnlineSoftmaxState(
            m=pick(Mb).reshape(G, T, bm),
            l=pick(Lb).reshape(G, T, bm),
            acc=pick(A).reshape(G, T, bm, D),
        )
        valid_g = np.broadcast_to(valid, (G, T, bm))
        order = plan.kv_perm[n].reshape(G, start)
        state, processed, row_keys = _prefix_traverse(
            q, state, Kg, Vg, order, valid_g, cfg.tau, bn, cfg.stop_mode
        )

        o = state.finalize().reshape(G, T * bm, D)
        vflat = valid.reshape(-1)
        real_rows = rows[:, vflat]
        np.put_along_axis(out, real_rows[..., None], o[:, vflat].astype(np.float32), axis=1)
        np.put_along_axis(row_keys_out, real_rows, row_keys.reshape(G, -1)[:, vflat], axis=1)
        trace.processed_tiles[n][:] = processed.reshape(Z, H, T)
        pass2 += _pass2_pairs(processed, valid.sum(axis=1), start, bn)

    trace.row_prefix_keys[:] = row_keys_out.reshape(Z, H, L)
    trace.pass2_pairs[:] = pass2.reshape(Z, H)
    return out.reshape(Z, H, L, D), trace


def fused_single_pass(Q, K, V, kv_perm, cfg: KernelConfig):
    """Per query tile, in original order: dense segment init, ranked prefix, finalize.

    ``kv_perm`` is either a :class:`PermutationPlan` or its ``kv_perm`` list.
    No pass-1 buffers are materialized. Returns ``(O, trace)``.
    """
    if not cfg.fused:
        raise ValueError("fused_single_pass needs a config with fused=True")
    Q, K, V, (Z, H, L, D) = _check_inputs(Q, K, V)
    if isinstance(kv_perm, PermutationPlan):
        _check_plan(kv_perm, cfg, L)
        kv_perm = kv_perm.kv_perm
    seg = SegmentConfig(L, cfg.segment_len)
    if len(kv_perm) != seg.n_segments:
        raise ValueError("plan/config mismatch: wrong number of segments in kv_perm")
    bm, bn = cfg.tiles.block_m, cfg.tiles.block_n
    G = Z * H
    Qg, Kg, Vg = _flat(Q), _flat(K), _flat(V)
    out = np.empty((G, L, D), dtype=np.float32)
    trace = _empty_trace(seg, cfg.tiles, Z, H)
    row_keys_out = np.zeros((G, L), dtype=np.int64)
    pass2 = np.zeros(G, dtype=np.int64)

    for n in range(seg.n_segments):
        start, stop = seg.bounds(n)
        order = np.asarray(kv_perm[n]).reshape(G, start)
        if order.size and order.max() >= start:
            raise ValueError("kv_perm reaches outside the causal prefix")
        for b, r0 in enumerate(range(0, stop - start, bm)):
            r1 = min(r0 + bm, stop - start)
            offsets = np.arange(r0, r1)[None, :]
            state = _segment_init(Qg, Kg, Vg, start, stop, offsets, bn)
            q = Qg[:, None, start + r0:start + r1]
            valid = np.ones((G, 1, r1 - r0), dtype=bool)
            state, processed, row_keys = _prefix_traverse(
                q, state, Kg, Vg, order, valid, cfg.tau, bn, cfg.stop_mode
            )
            out[:, start + r0:start + r1] = state.finalize()[:, 0]
            row_keys_out[:, start + r0:start + r1] = row_keys[:, 0]
            trace.processed_tiles[n][:, :, b] = processed[:, 0].reshape(Z, H)
            pass2 += np.minimum(processed[:, 0] * bn, start) * (r1 - r0)

    trace.row_prefix_keys[:] = row_keys_out.reshape(Z, H, L)
    trace.pass2_pairs[:] = pass2.reshape(Z, H)
    return out.reshape(Z, H, L, D), trace


def s2o_attention(Q, K, V, cfg: KernelConfig, plan: PermutationPlan | None = None):
    """Rank, then run the two-pass or fused kernel.

    Returns ``(O, trace, plan, cost)``. A precomputed ``plan`` skips ranking
    and reports zero ranking cost.
    """
    Q, K, V, (Z, H, L, D) = _check_inputs(Q, K, V)
    if plan is None:
        plan, cost = build_plan(Q, K, cfg.segment_len)
    else:
        cost = RankingCost()
    if cfg.fused:
        O, trace = fused_single_pass(Q, K, V, plan, cfg)
    else:
        bufs = pass1_dense_init(Q, K, V, cfg)
        O, trace = pass2_sparse(Q, K, V, bufs, plan, cfg)
    return O, trace, plan, cost
