"""Sweep driver: one dense reference, then every (variant, S, tau, k) point."""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import TileSpec, dense_causal_attention
from .baselines import BlockBudget, block_topk_attention
from .io import load_tensor_file
from .kernel import KernelConfig, KernelTrace, s2o_attention
from .metrics import SparsityReport, sparsity_report
from .plan import PermutationPlan, RankingCost
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

VARIANTS = ("two-pass", "fused", "no-q-reorder", "baseline-topk")
CSV_COLUMNS = ("variant", "S", "tau", "k", "sparsity", "mse", "mae", "pairs", "dot_products", "seconds")


@dataclass
class RunConfig:
    dims: tuple[int, int, int, int] = (1, 1, 2048, 64)
    synthetic: SyntheticSpec | None = None
    input_dir: str | None = None
    segment_lens: list[int] = field(default_factory=lambda: [128])
    taus: list[float] = field(default_factory=lambda: [0.005])
    tiles: TileSpec = field(default_factory=TileSpec)
    variants: list[str] = field(default_factory=lambda: ["two-pass"])
    ks: list[int] = field(default_factory=lambda: [8])
    block: tuple[int, int] | None = None
    stop_mode: str = "row"
    repeats: int = 3
    threads: int = 1
    out_json: str | None = None
    out_csv: str | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.input_dir is None):
            raise ValueError("exactly one input source is required: a synthetic spec or an input directory")
        for name in ("segment_lens", "taus", "variants", "ks"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variant(s) {sorted(unknown)}; expected {VARIANTS}")
        if min(self.segment_lens) < 1 or min(self.ks) < 0:
            raise ValueError("segment lengths must be >= 1 and k >= 0")
        if not all(t >= 0 for t in self.taus):
            raise ValueError("tau values must be non-negative")
        if self.repeats < 0:
            raise ValueError("repeats must be >= 0")

    def echo(self) -> dict:
        d = asdict(self)
        d["tiles"] = [self.tiles.block_m, self.tiles.block_n]
        return d

    def points(self):
        for variant in self.variants:
            if variant == "baseline-topk":
                for k in self.ks:
                    yield variant, None, None, k
            else:
                for S in self.segment_lens:
                    for tau in self.taus:
                        yield variant, S, tau, None


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("S2O_THREADS", default)))
    except ValueError:
        return default


def load_inputs(cfg: RunConfig):
    if cfg.input_dir is not None:
        d = Path(cfg.input_dir)
        return tuple(load_tensor_file(d / f"{name}.s2ot") for name in ("q", "k", "v"))
    return generate_synthetic(cfg.synthetic, cfg.dims)


def _merge_heads(parts):
    """Concatenate per-head-chunk results along the head axis."""
    outs, traces, plans, costs = zip(*parts)
    t0, p0 = traces[0], plans[0]
    trace = KernelTrace(
        segment=t0.segment,
        tiles=t0.tiles,
        processed_tiles=[np.concatenate([t.processed_tiles[n] for t in traces], axis=1) for n in range(len(t0.processed_tiles))],
        row_prefix_keys=np.concatenate([t.row_prefix_keys for t in traces], axis=1),
        pass1_pairs=np.concatenate([t.pass1_pairs for t in traces], axis=1),
        pass2_pairs=np.concatenate([t.pass2_pairs for t in traces], axis=1),
    )
    plan = PermutationPlan(
        p0.segment,
        [np.concatenate([p.q_perm[n] for p in plans], axis=1) for n in range(len(p0.q_perm))],
        [np.concatenate([p.kv_perm[n] for p in plans], axis=1) for n in range(len(p0.kv_perm))],
    )
    cost = RankingCost(sum(c.dot_products for c in costs), sum(c.sort_items for c in costs))
    return np.concatenate(outs, axis=1), trace, plan, cost


def s2o_by_heads(Q, K, V, kcfg: KernelConfig, threads: int = 1):
    """:func:`s2o_attention`, with heads split over up to ``threads`` workers."""
    H = Q.shape[1]
    if threads <= 1 or H == 1:
        return s2o_attention(Q, K, V, kcfg)
    chunks = np.array_split(np.arange(H), min(threads, H))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda c: s2o_attention(Q[:, c], K[:, c], V[:, c], kcfg), chunks))
    return _merge_heads(parts)


def _timed(fn, repeats: int):
    """Run ``fn`` once to warm up, then ``repeats`` more times; median seconds of the timed runs."""
    result = fn()
    if repeats == 0:
        return result, None
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, statistics.median(times)


def run_point(Q, K, V, ref, point, cfg: RunConfig) -> tuple[SparsityReport, float | None]:
    variant, S, tau, k = point
    echo = {"variant": variant, "S": S, "tau": tau, "k": k}
    if variant == "baseline-topk":
        br, bc = cfg.block or (cfg.tiles.block_m, cfg.tiles.block_n)
        budget = BlockBudget(br, bc, k)
        (O, pairs), seconds = _timed(lambda: block_topk_attention(Q, K, V, budget), cfg.repeats)
        return sparsity_report(O, ref, pairs, None, echo), seconds
    kcfg = KernelConfig(
        segment_len=S,
        tau=tau,
        tiles=cfg.tiles,
        q_reorder=variant == "two-pass",
        fused=variant == "fused",
        stop_mode=cfg.stop_mode,
    )
    (O, trace, _, cost), seconds = _timed(lambda: s2o_by_heads(Q, K, V, kcfg, cfg.threads), cfg.repeats)
    return sparsity_report(O, ref, trace.computed_pairs, cost, echo), seconds


def csv_row(report: SparsityReport, seconds) -> dict:
    c, a = report.config, report.aggregate
    return {
        "variant": c["variant"],
        "S": "" if c["S"] is None else c["S"],
        "tau": "" if c["tau"] is None else repr(c["tau"]),
        "k": "" if c["k"] is None else c["k"],
        "sparsity": repr(a["mean_sparsity"]),
        "mse": repr(a["mean_mse"]),
        "mae": repr(a["mean_mae"]),
        "pairs": a["computed_pairs"],
        "dot_products": report.ranking_cost.dot_products,
        "seconds": "" if seconds is None else repr(seconds),
    }


def _write(cfg: RunConfig, doc: dict, rows: list[dict]):
    if cfg.out_json:
        Path(cfg.out_json).write_text(json.dumps(doc, indent=2))
    if cfg.out_csv:
        with open(cfg.out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)


def run_sweep(cfg: RunConfig) -> dict:
    """Run every point and write the JSON report and CSV summary.

    On failure the reports written so far are flushed with ``"partial": true``
    and the exception is re-raised.
    """
    Q, K, V = load_inputs(cfg)
    ref = dense_causal_attention(Q, K, V)
    doc = {"config": cfg.echo(), "dims": list(Q.shape), "points": [], "partial": True}
    rows = []
    try:
        for point in cfg.points():
            log.info("point %s", point)
            report, seconds = run_point(Q, K, V, ref, point, cfg)
            entry = report.to_dict()
            entry["seconds"] = seconds
            doc["points"].append(entry)
            rows.append(csv_row(report, seconds))
    except Exception as exc:
        doc["error"] = f"{type(exc).__name__}: {exc}"
        _write(cfg, doc, rows)
        raise
    doc["partial"] = False
    _write(cfg, doc, rows)
    return doc
